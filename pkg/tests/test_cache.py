import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from decoupled_qa.cache import (HEADER, CacheReader, build_index, entry_size, read_entry, storage_estimate)
from decoupled_qa.compression import attach_compression
from decoupled_qa.decoupled import SplitSpec, encode_input, passage_input, split_model
from decoupled_qa.errors import CacheFormatError, ConfigError, DataError, EntryNotFoundError
from decoupled_qa.transformer import ModelConfig, init_standard

from oracles import half_roundtrip

CFG = ModelConfig(n_layers=4, d=16, n_heads=2, ffn=32, vocab_size=16, max_positions=32,
                  dropout=0.0, attention_dropout=0.0)


@pytest.fixture(scope="module")
def model():
    return split_model(init_standard(CFG, 0), SplitSpec(2, 2))


def _passages(n=12, seed=0):
    g = np.random.default_rng(seed)
    return [(100 + i, [int(t) for t in g.integers(3, 16, size=int(g.integers(3, 10)))]) for i in range(n)]


# -- storage estimator --------------------------------------------------------


def test_storage_reference_parameters():
    assert storage_estimate(32e6, 150, 768, 2) == 7_372_800_000_000
    assert storage_estimate(32e6, 150, 192, 2) / storage_estimate(32e6, 150, 768, 2) == 0.25
    # the reported 3.4 TB -> 858 GB pair keeps the same 4x ratio
    assert 858 / 3400 == pytest.approx(0.25, abs=0.003)


def test_storage_exact_for_huge_values():
    assert storage_estimate(10 ** 12, 10 ** 6, 4096, 4) == 10 ** 12 * 10 ** 6 * 4096 * 4
    for bad in ((0, 1, 1, 1), (1.5, 1, 1, 1), (-1, 2, 2, 2)):
        with pytest.raises(ConfigError):
            storage_estimate(*bad)


# -- f16 ----------------------------------------------------------------------


def test_one_third_half_precision(model, tmp_path):
    assert half_roundtrip(1 / 3) == 0.333251953125
    assert float(np.float32(1 / 3).astype(np.float16)) == half_roundtrip(1 / 3)


@settings(max_examples=200, deadline=None)
@given(st.floats(-60000, 60000, allow_nan=False, width=32))
def test_half_conversion_matches_struct_oracle(x):
    assert float(np.float32(x).astype("<f2")) == half_roundtrip(float(np.float32(x)))


# -- file round trips ---------------------------------------------------------


def test_f32_roundtrip_bit_exact(model, tmp_path):
    ps = _passages()
    summary = build_index(model, ps, "f32", tmp_path / "c.dtcx")
    assert summary.entries == len(ps) and summary.c == CFG.d
    with CacheReader(tmp_path / "c.dtcx") as r:
        assert r.ids == [pid for pid, _ in ps]
        for pid, toks in reversed(ps):  # random-access order
            ref = encode_input(model, passage_input(toks))
            got = r.read_entry(pid)
            assert torch.equal(got.matrix, ref.matrix) and torch.equal(got.pooled, ref.pooled)


def test_f16_error_bound(model, tmp_path):
    ps = _passages()
    build_index(model, ps, "f16", tmp_path / "c.dtcx")
    with CacheReader(tmp_path / "c.dtcx") as r:
        for pid, toks in ps:
            ref = encode_input(model, passage_input(toks)).matrix.detach()
            got = read_entry(r, pid).matrix
            # half precision: relative spacing 2^-10, rounding error at most half of it
            bound = np.maximum(np.abs(ref.numpy()), 2.0 ** -14) * 2.0 ** -11
            assert np.all(np.abs(got.numpy() - ref.numpy()) <= bound + 1e-12)


def test_byte_identical_rebuild(model, tmp_path):
    ps = _passages()
    build_index(model, ps, "f16", tmp_path / "a.dtcx")
    build_index(model, ps, "f16", tmp_path / "b.dtcx")
    assert (tmp_path / "a.dtcx").read_bytes() == (tmp_path / "b.dtcx").read_bytes()


def test_layout_and_sizes(model, tmp_path):
    ps = _passages(5)
    summary = build_index(model, ps, "f16", tmp_path / "c.dtcx")
    data = (tmp_path / "c.dtcx").read_bytes()
    magic, version, dtype, reserved, _, d, c, count = struct.unpack_from("<4sHBBQIIQ", data, 0)
    assert (magic, version, dtype, reserved, d, c, count) == (b"DTCX", 1, 1, 0, 16, 16, 5)
    expected = HEADER.size + 16 * 5 + sum(entry_size(len(t) + 1, 16, 2) for _, t in ps)
    assert len(data) == expected == summary.total_bytes
    assert summary.payload_bytes == sum(len(t) + 1 for _, t in ps) * 16 * 2
    first_off = struct.unpack_from("<QQ", data, HEADER.size)
    assert first_off == (100, HEADER.size + 16 * 5)


def test_compressed_index_width(tmp_path):
    m = split_model(init_standard(CFG, 0), SplitSpec(2, 2))
    attach_compression(m, 4, 0)
    build_index(m, _passages(3), "f32", tmp_path / "c.dtcx")
    with CacheReader(tmp_path / "c.dtcx", compressed=True) as r:
        rep = r.read_entry(101)
        assert rep.matrix.shape[1] == 4 and rep.pooled.shape == (4,) and rep.compressed
        assert r.pooled_matrix().shape == (3, 4)


def test_rebuild_from_read_values(tmp_path):
    """build -> read all -> rewrite from read values gives the same bytes (f32)."""
    m = split_model(init_standard(CFG, 0), SplitSpec(2, 2))
    ps = _passages(4)
    build_index(m, ps, "f32", tmp_path / "a.dtcx")
    with CacheReader(tmp_path / "a.dtcx") as r:
        entries = [(pid, r.read_entry(pid)) for pid in r.ids]
        raw = (tmp_path / "a.dtcx").read_bytes()
    body = b"".join(struct.pack("<QI", pid, rep.token_count) + rep.matrix.numpy().astype("<f4").tobytes()
                    + rep.pooled.numpy().astype("<f4").tobytes() for pid, rep in entries)
    assert raw.endswith(body)


# -- errors -------------------------------------------------------------------


def test_duplicate_and_bad_dtype(model, tmp_path):
    with pytest.raises(DataError):
        build_index(model, [(1, [4, 5]), (1, [6])], "f32", tmp_path / "c.dtcx")
    with pytest.raises(ConfigError):
        build_index(model, [(1, [4, 5])], "bf16", tmp_path / "c.dtcx")


def test_write_failure_leaves_no_file(model, tmp_path):
    target = tmp_path / "missing_dir" / "c.dtcx"
    with pytest.raises(DataError):
        build_index(model, [(1, [4, 5])], "f32", target)
    assert not target.exists()


def test_unknown_id(model, tmp_path):
    build_index(model, _passages(2), "f32", tmp_path / "c.dtcx")
    with CacheReader(tmp_path / "c.dtcx") as r:
        with pytest.raises(EntryNotFoundError, match="passage 7"):
            r.read_entry(7)


@pytest.mark.parametrize("corrupt", ["magic", "truncate", "version", "extra", "dtype"])
def test_corruption_detected(model, tmp_path, corrupt):
    path = tmp_path / "c.dtcx"
    build_index(model, _passages(3), "f16", path)
    data = bytearray(path.read_bytes())
    if corrupt == "magic":
        data[:4] = b"XXXX"
    elif corrupt == "truncate":
        data = data[:-5]
    elif corrupt == "version":
        data[4] = 9
    elif corrupt == "dtype":
        data[6] = 7
    else:
        data += b"\0"
    path.write_bytes(bytes(data))
    with pytest.raises(CacheFormatError):
        CacheReader(path)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        CacheReader(tmp_path / "nope.dtcx")
