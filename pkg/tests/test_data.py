import pytest
from hypothesis import given, settings, strategies as st

from decoupled_qa.data import (SyntheticTaskSpec, generate_synthetic, load_corpus, load_dataset, make_batch,
                               save_split)
from decoupled_qa.errors import ConfigError, DataError
from decoupled_qa.transformer import CLS, SEP


def test_always_answerable_single_token():
    exs = generate_synthetic(SyntheticTaskSpec(key_prob=1.0, answer_len=(1, 1)), 50)
    assert all(e.is_answerable and e.gold_start == e.gold_end for e in exs)


def test_never_answerable():
    exs = generate_synthetic(SyntheticTaskSpec(key_prob=0.0), 50)
    assert all((e.gold_start, e.gold_end) == (0, 0) for e in exs)
    assert all(e.question[0] not in e.passage for e in exs)


def test_deterministic_per_seed(tmp_path):
    spec = SyntheticTaskSpec(seed=4)
    for name in ("a", "b"):
        save_split(generate_synthetic(spec, 30), tmp_path / f"{name}.jsonl", tmp_path / f"{name}_c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a_c.jsonl").read_bytes() == (tmp_path / "b_c.jsonl").read_bytes()
    assert generate_synthetic(spec, 5) != generate_synthetic(SyntheticTaskSpec(seed=5), 5)


def test_rejects_passage_too_short():
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(passage_len=(3, 10), answer_len=(1, 3))
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(vocab_size=4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.integers(1, 3))
def test_gold_span_follows_only_key(seed, p, max_len):
    spec = SyntheticTaskSpec(vocab_size=20, passage_len=(max_len + 1, 12), key_prob=p,
                             answer_len=(1, max_len), seed=seed)
    for e in generate_synthetic(spec, 20):
        key = e.question[0]
        assert key >= 3 and all(t >= 3 for t in e.passage)
        hits = [i for i, t in enumerate(e.passage) if t == key]
        if e.is_answerable:
            assert len(hits) == 1
            at = hits[0] + len(e.question) + 2
            assert e.gold_start == at + 1
            assert 1 <= e.gold_end - e.gold_start + 1 <= max_len
            assert e.gold_end <= e.bounds()[1]
            assert e.gold_end - e.gold_start + 1 == spec.answer_length(key)
        else:
            assert hits == []


def test_roundtrip_and_missing(tmp_path):
    exs = generate_synthetic(SyntheticTaskSpec(), 10)
    save_split(exs, tmp_path / "d.jsonl", tmp_path / "c.jsonl")
    corpus = load_corpus(tmp_path / "c.jsonl")
    assert load_dataset(tmp_path / "d.jsonl", corpus) == exs
    assert corpus[3]["text"].split()[0] == f"w{exs[3].passage[0]}"
    with pytest.raises(DataError):
        load_corpus(tmp_path / "nope.jsonl")
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        load_corpus(tmp_path / "bad.jsonl")


def test_batch_layouts():
    exs = generate_synthetic(SyntheticTaskSpec(seed=2), 3)
    b = make_batch(exs)
    assert b.ids.shape[1] == b.q_ids.shape[1] + b.p_ids.shape[1]
    for i, e in enumerate(exs):
        n = len(e.question) + len(e.passage) + 3
        assert b.ids[i, :n].tolist() == [CLS, *e.question, SEP, *e.passage, SEP]
        assert int(b.mask[i].sum()) == n
        assert b.segments[i, :n].tolist() == [0, 0, 0] + [1] * (n - 3)
