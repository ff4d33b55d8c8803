from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fglora.checkpoint import (MAGIC_ADAPTER, Checkpoint, CheckpointError, decode, encode, load_checkpoint,
                               read_checkpoint, save_checkpoint, write_checkpoint)
from fglora.params import FrozenParameterError, ParamStore
from fglora.rng import SplitMix64, derive_seed

MASK = (1 << 64) - 1


def splitmix_reference(seed: int, n: int) -> list[int]:
    """Textbook scalar SplitMix64 on Python ints."""
    out, s = [], seed & MASK
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & MASK
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


# ---------------------------------------------------------------- PRNG


def test_splitmix_known_first_output():
    assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


@given(st.integers(0, MASK), st.integers(1, 40))
def test_splitmix_matches_scalar_reference(seed, n):
    assert [int(v) for v in SplitMix64(seed).next_u64(n)] == splitmix_reference(seed, n)


@given(st.integers(0, MASK), st.integers(0, 20), st.integers(0, 20))
def test_splitmix_blocks_concatenate(seed, a, b):
    g = SplitMix64(seed)
    split = np.concatenate([g.next_u64(a), g.next_u64(b)])
    assert np.array_equal(split, SplitMix64(seed).next_u64(a + b))


def test_derived_streams():
    g = SplitMix64(7)
    u = g.uniform(1000)
    assert np.all((u >= 0) & (u < 1))
    z = SplitMix64(7).normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    p = SplitMix64(3).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    assert np.array_equal(p, SplitMix64(3).permutation(50))
    k = SplitMix64(4).integers(5, size=1000)
    assert k.min() == 0 and k.max() == 4


def test_fork_and_derive_seed():
    g = SplitMix64(99)
    state = g.state
    a = g.fork("x").next_u64(3)
    assert g.state == state
    assert np.array_equal(a, g.fork("x").next_u64(3))
    assert not np.array_equal(a, g.fork("y").next_u64(3))
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", "2")
    assert derive_seed(1, "a") != derive_seed(2, "a")


# ---------------------------------------------------------------- ParamStore


def _store():
    return ParamStore({"b.weight": np.ones((2, 2)), "a.bias": np.zeros(3), "head.seg.weight": np.ones(4)})


def test_store_order_and_counts():
    s = _store()
    assert s.names() == ["a.bias", "b.weight", "head.seg.weight"]
    assert s.num_params() == 11
    with pytest.raises(KeyError):
        s.add("a.bias", np.zeros(1))


def test_set_trainable_and_freeze():
    s = _store()
    assert s.set_trainable(["head."]) == ["head.seg.weight"]
    assert s.trainable_names() == ["head.seg.weight"]
    assert s.num_params(s.trainable_names()) == 4
    with pytest.raises(KeyError):
        s.set_trainable(["nope."])
    s.freeze_all()
    assert s.trainable_names() == []
    with pytest.raises(FrozenParameterError):
        s.set_array("a.bias", np.ones(3))
    s.set_array("a.bias", np.ones(3), allow_frozen=True)
    with pytest.raises(ValueError):
        s.set_array("a.bias", np.ones(2), allow_frozen=True)


def test_hash_tracks_content_and_shape():
    s = _store()
    h = s.hash("a.bias")
    s.set_array("a.bias", np.zeros(3))
    assert s.hash("a.bias") == h
    s.set_array("a.bias", np.array([0.0, 0.0, 1e-300]))
    assert s.hash("a.bias") != h
    t = ParamStore({"x": np.zeros((2, 3))})
    u = ParamStore({"x": np.zeros((3, 2))})
    assert t.hash("x") != u.hash("x")


def test_copy_is_independent():
    s = _store()
    c = s.copy()
    c.set_array("a.bias", np.ones(3))
    assert s.hash("a.bias") != c.hash("a.bias")


# ---------------------------------------------------------------- checkpoint


@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=3),
                              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)),
                       max_size=4),
       st.dictionaries(st.text(max_size=5), st.text(max_size=8), max_size=3))
def test_checkpoint_roundtrip_is_bit_exact(tensors, meta):
    back = decode(encode(Checkpoint(tensors, meta)))
    assert back.metadata == meta
    assert set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_store_file_roundtrip(tmp_path):
    s = _store()
    s.metadata["depth"] = "3"
    save_checkpoint(s, tmp_path / "s.fgls")
    back = load_checkpoint(tmp_path / "s.fgls")
    assert back.hashes() == s.hashes()
    assert back.metadata["depth"] == "3"
    target = _store()
    target.set_array("a.bias", np.full(3, 7.0))
    load_checkpoint(tmp_path / "s.fgls", into=target)
    assert target.hashes() == s.hashes()


def test_empty_store_is_valid(tmp_path):
    save_checkpoint(ParamStore(), tmp_path / "e.fgls")
    assert len(load_checkpoint(tmp_path / "e.fgls")) == 0


def test_layout_header(tmp_path):
    write_checkpoint(Checkpoint({"w": np.arange(3.0)}), tmp_path / "w.fgls")
    raw = (tmp_path / "w.fgls").read_bytes()
    assert raw[:4] == b"FGLS"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert raw[-8:] == hashlib.blake2b(raw[:-8], digest_size=8).digest()


def test_corruption_truncation_and_version(tmp_path):
    p = tmp_path / "c.fgls"
    save_checkpoint(_store(), p)
    raw = bytearray(p.read_bytes())
    flipped = bytearray(raw)
    flipped[20] ^= 0x01
    with pytest.raises(CheckpointError):
        decode(bytes(flipped))
    with pytest.raises(CheckpointError):
        decode(bytes(raw[:-5]))
    payload = bytearray(raw[:-8])
    payload[4:8] = struct.pack("<I", 2)
    forged = bytes(payload) + hashlib.blake2b(bytes(payload), digest_size=8).digest()
    with pytest.raises(CheckpointError, match="version"):
        decode(forged)


def test_magic_and_shape_mismatch(tmp_path):
    p = tmp_path / "a.fgla"
    write_checkpoint(Checkpoint({"x": np.ones(2)}, magic=MAGIC_ADAPTER), p)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    assert read_checkpoint(p, MAGIC_ADAPTER).magic == MAGIC_ADAPTER
    q = tmp_path / "q.fgls"
    save_checkpoint(ParamStore({"a.bias": np.zeros(5)}), q)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(q, into=_store())
