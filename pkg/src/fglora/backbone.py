"""Small configurable 3-D UNet stand-in for the pretrained backbone.

Layer list for ``depth`` levels with widths ``c_l = base * 2**l``:

* ``encoder.level{l}.conv1``  k=3, ``c_{l-1}`` (or input channels) -> ``c_l``
* ``encoder.level{l}.conv2``  k=3, ``c_l -> c_l``
* ``encoder.level{l}.down``   k=3, stride 2, ``c_l -> c_l`` (all but the bottleneck)
* ``decoder.level{l}.up``     nearest 2x upsample, then k=3 ``c_{l+1} -> c_l``
* ``decoder.level{l}.fuse``   k=1 on the skip concatenation, ``2 c_l -> c_l``
* ``decoder.level{l}.conv``   k=3, ``c_l -> c_l``

Every conv carries a bias and is followed by ReLU.  There are no normalisation
layers, so a forward pass is a pure function of the parameter bytes.  Heads live
under ``head.*``: ``head.seg`` (k=1 conv to one logit channel), ``head.reg``
(global average pool of the bottleneck, then linear to one output) and
``head.recon`` (k=1 conv back to the input channels, used for pretraining).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .checkpoint import Checkpoint
from .params import FrozenParameterError, ParamStore
from .rng import SplitMix64
from .tensor_core import (
    AdamState,
    Tensor,
    adam_step,
    concat_channels,
    conv3d,
    global_avg_pool,
    linear,
    mse_loss,
    relu,
    upsample_nearest2x,
)

log = logging.getLogger(__name__)


# The segmentation head starts near zero so the first LoRA steps are not spent
# undoing a large random readout of the frozen decoder features.
SEG_HEAD_GAIN = 0.05


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    base_channels: int = 4
    depth: int = 3
    patch_size: int = 16

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("in_channels and base_channels must be positive")
        if self.depth < 2:
            raise ConfigError("depth must be at least 2")
        if self.patch_size < 2 or self.patch_size % (2 ** (self.depth - 1)):
            raise ConfigError(
                f"patch_size {self.patch_size} must be divisible by 2**(depth-1) = {2 ** (self.depth - 1)}"
            )

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.width(self.depth - 1)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1

    @property
    def padding(self) -> int:
        return self.k // 2


def layer_specs(config: UNetConfig) -> list[ConvSpec]:
    """Backbone convolutions in forward-execution order."""
    specs = []
    prev = config.in_channels
    for lvl in range(config.depth):
        c = config.width(lvl)
        specs.append(ConvSpec(f"encoder.level{lvl}.conv1", prev, c, 3))
        specs.append(ConvSpec(f"encoder.level{lvl}.conv2", c, c, 3))
        if lvl < config.depth - 1:
            specs.append(ConvSpec(f"encoder.level{lvl}.down", c, c, 3, stride=2))
        prev = c
    for lvl in reversed(range(config.depth - 1)):
        c = config.width(lvl)
        specs.append(ConvSpec(f"decoder.level{lvl}.up", config.width(lvl + 1), c, 3))
        specs.append(ConvSpec(f"decoder.level{lvl}.fuse", 2 * c, c, 1))
        specs.append(ConvSpec(f"decoder.level{lvl}.conv", c, c, 3))
    return specs


def conv_layer_map(config: UNetConfig) -> dict[str, ConvSpec]:
    return {s.name: s for s in layer_specs(config)}


def _he_init(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(shape, scale=np.sqrt(2.0 / fan_in))


def build_unet(config: UNetConfig, seed: int = 0) -> ParamStore:
    """Backbone parameters (encoder + decoder), He fan-in init, all trainable."""
    store = ParamStore(metadata={
        "in_channels": str(config.in_channels),
        "base_channels": str(config.base_channels),
        "depth": str(config.depth),
        "patch_size": str(config.patch_size),
    })
    rng = SplitMix64(seed)
    for spec in layer_specs(config):
        shape = (spec.c_out, spec.c_in, spec.k, spec.k, spec.k)
        store.add(spec.name + ".weight", _he_init(rng, shape, spec.c_in * spec.k ** 3))
        store.add(spec.name + ".bias", np.zeros(spec.c_out))
    return store


def config_from_store(store: ParamStore) -> UNetConfig:
    md = store.metadata
    try:
        return UNetConfig(int(md["in_channels"]), int(md["base_channels"]), int(md["depth"]), int(md["patch_size"]))
    except KeyError as e:
        raise ConfigError(f"store metadata lacks {e.args[0]!r}; cannot infer UNet config") from None


def build_head(kind: str, config: UNetConfig, seed: int = 0) -> ParamStore:
    """Task head parameters: ``seg``, ``reg`` or ``recon``."""
    rng = SplitMix64(seed)
    store = ParamStore()
    c0 = config.width(0)
    if kind == "seg":
        store.add("head.seg.weight", _he_init(rng, (1, c0, 1, 1, 1), c0) * SEG_HEAD_GAIN)
        store.add("head.seg.bias", np.zeros(1))
    elif kind == "reg":
        cb = config.bottleneck_channels
        store.add("head.reg.weight", rng.normal((1, cb), scale=1.0 / np.sqrt(cb)))
        store.add("head.reg.bias", np.full(1, 0.5))
    elif kind == "recon":
        store.add("head.recon.weight", _he_init(rng, (config.in_channels, c0, 1, 1, 1), c0) * 0.5)
        store.add("head.recon.bias", np.zeros(config.in_channels))
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return store


def head_param_count(kind: str, config: UNetConfig) -> int:
    c0, cb = config.width(0), config.bottleneck_channels
    return {"seg": c0 + 1, "reg": cb + 1, "recon": config.in_channels * (c0 + 1)}[kind]


# ---------------------------------------------------------------- forward

class _Ctx:
    __slots__ = ("store", "adapter", "training", "rng", "layers")

    def __init__(self, store, adapter, training, rng):
        self.store = store
        self.adapter = adapter
        self.training = training
        self.rng = rng
        self.layers = conv_layer_map(config_from_store(store))
        if adapter is not None:
            missing = [n for n in adapter.target_names() if n not in self.layers]
            if missing:
                raise KeyError(f"adapter targets non-existent layers: {missing}")


def _conv(ctx: _Ctx, name: str, x: Tensor) -> Tensor:
    spec = ctx.layers[name]
    w = ctx.store[name + ".weight"]
    b = ctx.store[name + ".bias"]
    if ctx.adapter is not None and ctx.adapter.targets(name):
        y = ctx.adapter.conv_forward(name, x, w, b, spec.stride, spec.padding, ctx.training, ctx.rng)
    else:
        y = conv3d(x, w, b, stride=spec.stride, padding=spec.padding)
    return relu(y)


def _check_input(store: ParamStore, volume: Tensor) -> Tensor:
    cfg = config_from_store(store)
    v = volume if isinstance(volume, Tensor) else Tensor(volume)
    if v.ndim not in (4, 5):
        raise ValueError(f"volume must be [C,P,P,P] or [N,C,P,P,P], got {v.shape}")
    c, *spatial = v.shape[-4:]
    if c != cfg.in_channels:
        raise ValueError(f"volume has {c} channels, backbone expects {cfg.in_channels}")
    if any(s != cfg.patch_size for s in spatial):
        raise ValueError(f"volume spatial extents {tuple(spatial)} != patch size {cfg.patch_size}")
    return v


def _encode(ctx: _Ctx, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    depth = int(ctx.store.metadata["depth"])
    skips = []
    for lvl in range(depth):
        x = _conv(ctx, f"encoder.level{lvl}.conv1", x)
        x = _conv(ctx, f"encoder.level{lvl}.conv2", x)
        if lvl < depth - 1:
            skips.append(x)
            x = _conv(ctx, f"encoder.level{lvl}.down", x)
    return x, skips


def _decode(ctx: _Ctx, x: Tensor, skips: list[Tensor]) -> Tensor:
    for lvl in reversed(range(len(skips))):
        x = _conv(ctx, f"decoder.level{lvl}.up", upsample_nearest2x(x))
        x = _conv(ctx, f"decoder.level{lvl}.fuse", concat_channels([x, skips[lvl]]))
        x = _conv(ctx, f"decoder.level{lvl}.conv", x)
    return x


def _head_param(store: ParamStore, head: ParamStore | None, name: str) -> Tensor:
    src = head if head is not None else store
    if name not in src:
        raise KeyError(f"head parameter {name!r} not found")
    return src[name]


def decoder_features(store, volume, adapter=None, training=False, rng=None) -> Tensor:
    ctx = _Ctx(store, adapter, training, rng)
    x = _check_input(store, volume)
    bottom, skips = _encode(ctx, x)
    return _decode(ctx, bottom, skips)


def forward_seg(store: ParamStore, volume, adapter=None, head: ParamStore | None = None,
                training: bool = False, rng: SplitMix64 | None = None) -> Tensor:
    """Per-voxel logits ``[1,P,P,P]`` (or ``[N,1,P,P,P]`` for batched input)."""
    feats = decoder_features(store, volume, adapter, training, rng)
    w = _head_param(store, head, "head.seg.weight")
    b = _head_param(store, head, "head.seg.bias")
    return conv3d(feats, w, b)


def forward_recon(store: ParamStore, volume, head: ParamStore | None = None) -> Tensor:
    feats = decoder_features(store, volume)
    return conv3d(feats, _head_param(store, head, "head.recon.weight"), _head_param(store, head, "head.recon.bias"))


def forward_encoder(store: ParamStore, volume, adapter=None, training: bool = False,
                    rng: SplitMix64 | None = None) -> Tensor:
    """Bottleneck feature vector ``[C_bottleneck]`` (``[N, C]`` batched)."""
    ctx = _Ctx(store, adapter, training, rng)
    x = _check_input(store, volume)
    bottom, _ = _encode(ctx, x)
    return global_avg_pool(bottom)


def forward_reg(store: ParamStore, volume, adapter=None, head: ParamStore | None = None,
                training: bool = False, rng: SplitMix64 | None = None) -> Tensor:
    """Scalar prediction per sample: ``[1]`` or ``[N, 1]``."""
    feats = forward_encoder(store, volume, adapter, training, rng)
    return linear(feats, _head_param(store, head, "head.reg.weight"), _head_param(store, head, "head.reg.bias"))


# ---------------------------------------------------------------- loading / freezing

@dataclass
class LoadReport:
    matched: int
    total_in_store: int
    skipped_names: list[str]
    unmatched_store_names: list[str]

    def __str__(self) -> str:
        return f"loaded {self.matched}/{self.total_in_store} keys"


def load_partial(store: ParamStore, checkpoint) -> LoadReport:
    """Copy every checkpoint entry whose name and shape both match ``store``.

    Mismatches are reported, never fatal.  ``skipped_names`` lists checkpoint
    entries that were not loaded; ``unmatched_store_names`` lists store entries
    that received nothing.
    """
    tensors = checkpoint.tensors if isinstance(checkpoint, Checkpoint) else checkpoint.arrays()
    loaded, skipped = [], []
    for name in sorted(tensors):
        arr = tensors[name]
        if name in store and store[name].shape == arr.shape:
            store.set_array(name, arr, allow_frozen=True)
            loaded.append(name)
        else:
            skipped.append(name)
    loaded_set = set(loaded)
    unmatched = [n for n in store.names() if n not in loaded_set]
    return LoadReport(len(loaded), len(store), skipped, unmatched)


def freeze_all(store: ParamStore) -> None:
    store.freeze_all()


def set_trainable(store: ParamStore, name_prefixes: Iterable[str]) -> list[str]:
    return store.set_trainable(name_prefixes)


# ---------------------------------------------------------------- pretraining

class DivergenceError(RuntimeError):
    pass


def pretrain_backbone(store: ParamStore, volumes: list[np.ndarray], epochs: int, seed: int = 0,
                      lr: float = 3e-3, batch_size: int = 2) -> list[float]:
    """Voxelwise reconstruction pretext: minimise MSE(recon(x), x).

    ``volumes`` are ``[C,P,P,P]`` patches.  A ``head.recon`` head is added to
    ``store`` when missing.  Returns the mean training loss per epoch, where
    entry 0 is the loss of the untrained network and entry ``e`` the mean loss
    over epoch ``e``'s updates.
    """
    cfg = config_from_store(store)
    if "head.recon.weight" not in store:
        store.update(build_head("recon", cfg, seed=seed + 1))
    params = [(n, t) for n, t in store.items() if t.requires_grad]
    if not params:
        raise FrozenParameterError("pretrain_backbone: store has no trainable parameters")
    data = np.stack([np.asarray(v, dtype=np.float64) for v in volumes])
    rng = SplitMix64(seed)
    state = AdamState(lr=lr)

    def batch_loss(xb):
        x = Tensor(xb)
        return mse_loss(forward_recon(store, x), x)

    from .tensor_core import no_grad
    with no_grad():
        history = [float(np.mean([batch_loss(data[i:i + batch_size]).item()
                                  for i in range(0, len(data), batch_size)]))]
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for i in range(0, len(order), batch_size):
            store.zero_grad()
            loss = batch_loss(data[order[i:i + batch_size]])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"pretraining diverged at epoch {epoch}")
            loss.backward()
            adam_step(params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch + 1, history[-1])
    return history
