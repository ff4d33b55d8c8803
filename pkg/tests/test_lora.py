from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fglora import backbone as bb
from fglora.harness import fmt_count
from fglora.lora import (LoRAAdapter, LoRAConfig, LoRAError, MergeError, Placement, adapted_conv_forward,
                         analytic_adapter_params, count_trainable, create_adapter, load_adapter, merge_adapter,
                         resolve_targets, save_adapter)
from fglora.params import ParamStore
from fglora.rng import SplitMix64
from fglora.tensor_core import Tensor, conv3d

from oracles import unet_conv_shapes

FUSE = ("decoder.level0.fuse", "decoder.level1.fuse")


def _store(cfg=bb.UNetConfig(), seed=0):
    store = bb.build_unet(cfg, seed=seed)
    store.update(bb.build_head("seg", cfg, seed=seed + 1))
    store.freeze_all()
    return store


def _randomise_B(adapter, seed):
    rng = SplitMix64(seed)
    for name in adapter.target_names():
        b = adapter.B(name)
        b.data = rng.normal(b.shape)


def test_fresh_adapter_is_identity_everywhere():
    store = _store()
    x = SplitMix64(2).normal((2, 16, 16, 16))
    base = bb.forward_seg(store, x).data.tobytes()
    for placement in Placement:
        a = create_adapter(store, LoRAConfig(rank=2, placement=placement), seed=9)
        assert bb.forward_seg(store, x, a).data.tobytes() == base
        assert all(np.all(a.B(n).data == 0) for n in a.target_names())


def test_create_adapter_shapes_seed_and_backbone_untouched():
    store = _store()
    before = store.hashes()
    a = create_adapter(store, LoRAConfig(rank=2), seed=5)
    b = create_adapter(store, LoRAConfig(rank=2), seed=5)
    assert a.params.hashes() == b.params.hashes()
    assert store.hashes() == before
    for name, spec in a.layers.items():
        assert a.A(name).shape == (2, spec.c_in)
        assert a.B(name).shape == (spec.c_out, 2)
    assert set(a.params.trainable_names()) == set(a.params.names())


def test_single_layer_count_is_96():
    spec = bb.ConvSpec("layer", 8, 16, 3)
    assert analytic_adapter_params([spec], rank=4) == 96


def test_placement_targets():
    store = _store()
    enc = resolve_targets(store, LoRAConfig(placement=Placement.ENCODER_ONLY))
    both = resolve_targets(store, LoRAConfig(placement=Placement.ENCODER_AND_DECODER))
    assert all(s.name.startswith("encoder.") for s in enc)
    assert {s.name for s in both} == set(unet_conv_shapes(2, 4, 3))


def test_config_and_target_errors():
    store = _store()
    with pytest.raises(LoRAError, match="exceeds"):
        create_adapter(store, LoRAConfig(rank=5), seed=0)
    with pytest.raises(LoRAError, match="no conv layer"):
        create_adapter(store, LoRAConfig(target_layer_pattern=("nothing.",)), seed=0)
    for kwargs in ({"rank": 0}, {"alpha": 0.0}, {"dropout_p": 1.0}):
        with pytest.raises(LoRAError):
            LoRAConfig(**kwargs)


# ---------------------------------------------------------------- adapted forward


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
def test_adapted_forward_equals_conv_with_explicit_delta(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    c_in, c_out = 3, 3
    x = rng.normal(size=(c_in, 8, 8, 8))
    w, b = rng.normal(size=(c_out, c_in, k, k, k)), rng.normal(size=c_out)
    delta = rng.normal(size=(c_out, c_in))
    u, s, vt = np.linalg.svd(delta)
    B, A = u * s, vt                      # full rank, B @ A == delta
    scaling = 0.5
    got = adapted_conv_forward(x, w, b, A, B, scaling, stride=stride).data
    merged = w.copy()
    merged[:, :, k // 2, k // 2, k // 2] += scaling * delta
    want = conv3d(x, merged, b, stride=stride, padding=k // 2).data
    assert np.max(np.abs(got - want)) < 1e-10


def test_adapted_forward_identities():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    A, B = rng.normal(size=(2, 2)), np.zeros((3, 2))
    base = conv3d(x, w, b, padding=1).data
    assert np.array_equal(adapted_conv_forward(x, w, b, A, B, 2.0).data, base)
    B = rng.normal(size=(3, 2))
    eval_out = adapted_conv_forward(x, w, b, A, B, 2.0, dropout_p=0.3, training=False).data
    nodrop = adapted_conv_forward(x, w, b, A, B, 2.0, dropout_p=0.0, training=True, rng=SplitMix64(1)).data
    assert np.array_equal(eval_out, nodrop)
    d1 = adapted_conv_forward(x, w, b, A, B, 2.0, dropout_p=0.3, training=True, rng=SplitMix64(4)).data
    d2 = adapted_conv_forward(x, w, b, A, B, 2.0, dropout_p=0.3, training=True, rng=SplitMix64(4)).data
    assert np.array_equal(d1, d2) and not np.array_equal(d1, eval_out)
    with pytest.raises(LoRAError, match="random stream"):
        adapted_conv_forward(x, w, b, A, B, 2.0, dropout_p=0.3, training=True)


@given(st.floats(0.1, 10), st.integers(0, 1000))
def test_low_rank_path_linearity(scaling, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 4, 4, 4)), np.zeros((3, 2, 1, 1, 1))
    A, B = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
    one = adapted_conv_forward(x, w, None, A, B, scaling).data
    two = adapted_conv_forward(x, w, None, A, B / 2, scaling * 2).data
    assert np.max(np.abs(one - two)) <= 1e-12 * max(1.0, np.max(np.abs(one)))


def test_effective_update_rank_bound():
    store = _store()
    a = create_adapter(store, LoRAConfig(rank=2), seed=1)
    _randomise_B(a, 2)
    for name in a.target_names():
        assert np.linalg.matrix_rank(a.delta_w(name)) <= 2


# ---------------------------------------------------------------- merging


def merge_equivalence_max_error(n_inputs: int = 20, seed: int = 0) -> float:
    store = _store()
    adapter = create_adapter(store, LoRAConfig(rank=2, target_layer_pattern=FUSE), seed=seed)
    _randomise_B(adapter, seed + 1)
    merged = merge_adapter(store, adapter)
    rng = SplitMix64(seed + 2)
    worst = 0.0
    for _ in range(n_inputs):
        x = rng.normal((2, 16, 16, 16))
        adapted = bb.forward_seg(store, x, adapter).data
        folded = bb.forward_seg(merged, x).data
        worst = max(worst, float(np.max(np.abs(adapted - folded))))
    return worst


def test_merge_equivalence_on_k1_targets():
    assert merge_equivalence_max_error(20) < 1e-10


def test_zero_merge_changes_no_tensor():
    store = _store()
    a = create_adapter(store, LoRAConfig(rank=2, target_layer_pattern=FUSE), seed=0)
    merged = merge_adapter(store, a)
    assert merged.hashes() == store.hashes()
    assert merged.metadata["merged_adapters"] == "task"


def test_merge_refusals():
    store = _store()
    a = create_adapter(store, LoRAConfig(rank=2, target_layer_pattern=FUSE), seed=0)
    merge_adapter(store, a)
    with pytest.raises(MergeError, match="already"):
        merge_adapter(store, a)
    k3 = create_adapter(store, LoRAConfig(rank=2), seed=0)
    with pytest.raises(MergeError, match="k>1"):
        merge_adapter(store, k3)


# ---------------------------------------------------------------- counting


def random_count_cases(n: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        depth = int(rng.integers(2, 4))
        base = int(rng.choice([2, 4, 8]))
        in_ch = int(rng.integers(1, 4))
        rank = int(rng.integers(1, min(in_ch, base) + 1))   # the first conv is the narrowest
        placement = Placement(rng.choice([p.value for p in Placement]))
        kind = str(rng.choice(["seg", "reg"]))
        yield bb.UNetConfig(in_ch, base, depth, 2 ** depth), rank, placement, kind


def analytic_trainable(cfg: bb.UNetConfig, rank: int, placement: Placement, kind: str) -> int:
    prefixes = placement.prefixes
    layers = unet_conv_shapes(cfg.in_channels, cfg.base_channels, cfg.depth)
    adapter = sum(rank * (ci + co) for name, (ci, co) in layers.items() if name.startswith(prefixes))
    head = cfg.base_channels + 1 if kind == "seg" else cfg.base_channels * 2 ** (cfg.depth - 1) + 1
    return adapter + head


def count_mismatches() -> list:
    bad = []
    for cfg, rank, placement, kind in random_count_cases():
        store = bb.build_unet(cfg)
        adapter = create_adapter(store, LoRAConfig(rank=rank, placement=placement), seed=0)
        head = bb.build_head(kind, cfg)
        got = count_trainable(store, adapter, head)
        want = analytic_trainable(cfg, rank, placement, kind)
        if got["trainable_params"] != want or got["backbone_params"] != store.num_params():
            bad.append((cfg, rank, placement, kind, got, want))
    return bad


def test_count_trainable_matches_formula_on_random_configs():
    assert count_mismatches() == []


def test_count_trainable_fraction_and_empty():
    store = _store()
    c = count_trainable(store)
    assert c["trainable_params"] == 0 and c["fraction"] == 0.0
    assert c["backbone_params"] == store.num_params() - bb.head_param_count("seg", bb.UNetConfig())
    a = create_adapter(store, LoRAConfig(), seed=0)
    c = count_trainable(store, a)
    assert c["fraction"] == a.num_params() / c["backbone_params"]


def reference_sized_count() -> int:
    """Adapter + head fixture whose trainable count is the reference T1 figure, 46,872."""
    params = ParamStore({"layer.lora_A": np.zeros((8, 2929)), "layer.lora_B": np.zeros((2929, 8))})
    adapter = LoRAAdapter("t1", LoRAConfig(rank=8, alpha=16), params, {"layer": bb.ConvSpec("layer", 2929, 2929, 1)})
    head = ParamStore({"head.seg.weight": np.zeros((1, 7, 1, 1, 1)), "head.seg.bias": np.zeros(1)})
    return count_trainable(None, adapter, head)["trainable_params"]


def test_reference_sized_count_renders_with_separator():
    assert fmt_count(reference_sized_count()) == "46,872"


# ---------------------------------------------------------------- persistence


def test_adapter_roundtrip(tmp_path):
    store = _store()
    cfg = LoRAConfig(rank=2, alpha=4.0, placement=Placement.ENCODER_ONLY)
    a = create_adapter(store, cfg, seed=3, task_id="seg")
    _randomise_B(a, 7)
    save_adapter(a, tmp_path / "a.fgla")
    back = load_adapter(tmp_path / "a.fgla", store=store, config=cfg)
    assert back.params.hashes() == a.params.hashes()
    assert back.task_id == "seg" and back.config == cfg
    assert back.layers == a.layers
    assert back.params.trainable_names() == []


def test_adapter_load_errors(tmp_path):
    store = _store()
    a = create_adapter(store, LoRAConfig(rank=2), seed=3)
    save_adapter(a, tmp_path / "a.fgla")
    with pytest.raises(LoRAError, match="rank"):
        load_adapter(tmp_path / "a.fgla", config=LoRAConfig(rank=4))
    other = bb.build_unet(bb.UNetConfig(base_channels=2))
    with pytest.raises(LoRAError, match="incompatible"):
        load_adapter(tmp_path / "a.fgla", store=other)
