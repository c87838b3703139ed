import json

import pytest
import yaml

from decoupled_qa import config as cfgmod
from decoupled_qa.cli import EXIT_CONFIG, EXIT_DATA, run
from decoupled_qa.errors import ConfigError

TINY = {
    "task": {"vocab_size": 16, "passage_len": [4, 8], "n_train": 200, "n_eval": 40},
    "model": {"n_layers": 2, "d": 16, "n_heads": 2, "ffn": 32, "max_positions": 16},
    "split": "1-1",
    "teacher_train": {"lr": 1e-3, "epochs": 1, "warmup_steps": 2},
    "distill_train": {"lr": 1e-3, "epochs": 1, "warmup_steps": 2},
    "compression": {"dim": 4, "phase1": {"epochs": 1, "warmup_steps": 2},
                    "phase2": {"lr": 1e-3, "epochs": 1, "warmup_steps": 2}},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


# -- config -------------------------------------------------------------------


def test_defaults_roundtrip():
    cfg = cfgmod.from_dict({})
    assert cfgmod.from_dict(yaml.safe_load(cfgmod.dump(cfg))) == cfg


def test_partial_section_keeps_its_own_defaults():
    cfg = cfgmod.from_dict({"teacher_train": {"batch_size": 8}})
    ref = cfgmod.from_dict({})
    assert cfg.teacher_train.batch_size == 8
    assert cfg.teacher_train.epochs == ref.teacher_train.epochs
    assert cfg.teacher_train.lr == ref.teacher_train.lr


@pytest.mark.parametrize("data", [{"bogus": 1}, {"model": {"depth": 3}},
                                  {"compression": {"phase1": {"momentum": 0.9}}}, {"model": 5}])
def test_unknown_or_malformed_keys_rejected(data):
    with pytest.raises(ConfigError):
        cfgmod.from_dict(data)


def test_eval_and_train_seeds_differ():
    cfg = cfgmod.from_dict({"seed": 3})
    assert cfg.task_spec("train").seed != cfg.task_spec("eval").seed
    assert cfg.train_config(cfg.teacher_train).seed == 3


# -- cli ----------------------------------------------------------------------


def test_print_defaults(capsys):
    assert run(["--print-defaults"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == cfgmod.to_dict(cfgmod.from_dict({}))


def test_flops_sweep(capsys, tmp_path):
    assert run(["flops", "--layers", "12", "--sweep", "--out", str(tmp_path)]) == 0
    row = capsys.readouterr().out.splitlines()[1]
    assert [c.strip() for c in row.split("|")[1:]] == \
        ["1.0", ".91", ".83", ".75", ".66", ".58", ".50", ".41", ".33", ".25", ".16", ".08"]


def test_flops_detailed(capsys, tmp_path):
    assert run(["flops", "--split", "5-7", "--d", "768", "--ffn", "3072", "--out", str(tmp_path)]) == 0
    assert "225,256 / 275,560" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run(["gen-data", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run(["decouple", "--out", str(tmp_path / "empty")]) == EXIT_DATA
    assert run(["flops", "--split", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_workflow_end_to_end(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "run")
    common = ["--config", str(tiny_config), "--out", out]
    for cmd in (["gen-data"], ["train-teacher"], ["decouple"], ["distill"], ["compress"], ["index"]):
        assert run(cmd + common) == 0, cmd
    assert (tmp_path / "run" / "config.resolved.yaml").exists()
    capsys.readouterr()
    assert run(["eval"] + common) == 0
    cached = json.loads(capsys.readouterr().out)
    assert run(["eval", "--online"] + common) == 0
    online = json.loads(capsys.readouterr().out)
    assert set(cached) == {"EM", "F1"} and abs(cached["F1"] - online["F1"]) < 5
    assert run(["ask", "w5", "-k", "2"] + common) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line == "no answer" or line.startswith("passage ")
    assert run(["ask", "what?"] + common) == EXIT_CONFIG
    # a cache built by another model is refused
    assert run(["ask", "5", "--model", str(tmp_path / "run" / "student.dtmw")] + common) == 3
