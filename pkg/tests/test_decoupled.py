import pytest
import torch

from decoupled_qa import checkpoint
from decoupled_qa.data import make_batch, generate_synthetic, SyntheticTaskSpec
from decoupled_qa.decoupled import (DecoupledModel, SplitSpec, count_stack_calls, cross_forward, encode_input,
                                    forward_batch, full_forward, passage_input, pooled_mean, question_input,
                                    split_model)
from decoupled_qa.errors import ConfigError, ShapeError
from decoupled_qa.transformer import ModelConfig, encode, init_standard

CFG = ModelConfig(n_layers=4, d=16, n_heads=2, ffn=32, vocab_size=20, max_positions=40,
                  dropout=0.0, attention_dropout=0.0)


@pytest.fixture(scope="module")
def teacher():
    return init_standard(CFG, 0)


def test_split_spec_validation():
    assert SplitSpec.parse("5-7") == SplitSpec(5, 7)
    for bad in ("12-0", "0-4", "abc", "1-2-3"):
        with pytest.raises(ConfigError):
            SplitSpec.parse(bad)


def test_split_copies_layers_and_tables(teacher):
    m = split_model(teacher, SplitSpec(1, 3))
    assert len(m.input_layers) == 1 and len(m.cross_layers) == 3
    assert torch.equal(m.global_position, teacher.embeddings.position)
    assert torch.equal(m.global_segment, teacher.embeddings.segment)
    assert torch.equal(m.cross_layers[0].w_q, teacher.layers[1].w_q)
    assert torch.equal(m.head.start, teacher.head.start)


def test_split_twelve_layers_five_seven():
    cfg = ModelConfig(n_layers=12, d=8, n_heads=2, ffn=8, vocab_size=10, max_positions=8)
    m = split_model(init_standard(cfg, 0), SplitSpec.parse("5-7"))
    assert (len(m.input_layers), len(m.cross_layers)) == (5, 7)


def test_split_depth_mismatch(teacher):
    with pytest.raises(ConfigError):
        split_model(teacher, SplitSpec(2, 3))


@pytest.mark.parametrize("split", ["1-3", "2-2", "3-1"])
def test_single_input_equivalence(teacher, split):
    m = split_model(teacher, SplitSpec.parse(split))
    with torch.no_grad():
        m.global_position.zero_()
        m.global_segment.zero_()
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        n = int(torch.randint(1, 10, (1,), generator=g))
        q = torch.randint(3, CFG.vocab_size, (n,), generator=g).tolist()
        ids = torch.tensor(question_input(q))
        ref = encode(teacher, ids, torch.zeros_like(ids))
        out = cross_forward(m, encode_input(m, ids), None)
        assert float((out.final_hidden - ref.final_hidden).abs().max()) < 1e-5
        assert float((out.start_logits - ref.start_logits).abs().max()) < 1e-5


def test_encode_input_shapes_and_pooled(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    rep = encode_input(m, passage_input(list(range(3, 18))))
    assert rep.matrix.shape == (16, CFG.d)
    assert torch.allclose(rep.pooled, pooled_mean(rep.matrix, rep.mask), atol=1e-6)
    again = encode_input(m, passage_input(list(range(3, 18))))
    assert torch.equal(rep.matrix, again.matrix)


def test_all_masked_rejected(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    with pytest.raises(ShapeError):
        encode_input(m, [4, 5], mask=[0, 0])


def test_combined_length_checked(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    q = encode_input(m, question_input([4] * 16))
    p = encode_input(m, passage_input([5] * 30))
    with pytest.raises(ShapeError):
        cross_forward(m, q, p)


def test_concat_length_and_passage_rows_identical(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    p = encode_input(m, passage_input([7, 8, 9]))
    a = cross_forward(m, encode_input(m, question_input([4, 5])), p)
    b = cross_forward(m, encode_input(m, question_input([6])), p)
    assert a.start_logits.shape == (4 + 4,)
    # strip the global additions: both calls saw the cached matrix unchanged
    for out, off in ((a, 4), (b, 3)):
        rows = out.hidden_states[0][off:] - m.global_position[off:off + 4] - m.global_segment[1]
        assert torch.allclose(rows, p.matrix, atol=1e-6)


def test_full_forward_composition(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    q, p = [4, 5], [7, 8, 9, 10]
    a = full_forward(m, q, p)
    b = cross_forward(m, encode_input(m, question_input(q)), encode_input(m, passage_input(p)))
    assert torch.equal(a.start_logits, b.start_logits)
    assert torch.equal(full_forward(m, q, p).end_logits, a.end_logits)


def test_differs_from_standard(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    from decoupled_qa.transformer import build_input
    ids, segs = build_input([4, 5], [7, 8, 9, 10])
    ref = encode(teacher, torch.tensor(ids), torch.tensor(segs))
    assert not torch.allclose(full_forward(m, [4, 5], [7, 8, 9, 10]).start_logits, ref.start_logits, atol=1e-6)


def test_batched_matches_single(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    exs = generate_synthetic(SyntheticTaskSpec(vocab_size=20, passage_len=(4, 9), seed=3), 6)
    b = make_batch(exs)
    out = forward_batch(m, b.q_ids, b.q_mask, b.p_ids, b.p_mask)
    for i, ex in enumerate(exs):
        single = full_forward(m, ex.question, ex.passage)
        n = single.start_logits.shape[0]
        assert torch.allclose(out.start_logits[i, :n], single.start_logits, atol=1e-5)
        assert torch.all(out.mask[i, n:] == 0)


def test_question_encoded_once(teacher):
    m = split_model(teacher, SplitSpec(2, 2))
    passages = [encode_input(m, passage_input([5 + i, 6, 7])) for i in range(4)]
    with count_stack_calls() as calls:
        q = encode_input(m, question_input([9]))
        for p in passages:
            cross_forward(m, q, p)
    assert calls["input"] == 1 and calls["cross"] == 4


def test_checkpoint_roundtrip(teacher, tmp_path):
    m = split_model(teacher, SplitSpec(1, 3))
    path = tmp_path / "m.dtmw"
    checkpoint.save(m, path)
    back = checkpoint.load(path)
    assert isinstance(back, DecoupledModel) and back.split == SplitSpec(1, 3)
    for (n, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    assert checkpoint.to_bytes(back) == checkpoint.to_bytes(m)
    assert path.read_bytes()[:4] == b"DTMW"
