"""Per-task low-rank adapters on the backbone's convolutions.

Each targeted conv ``y = conv(x; W) + b`` gains a parallel channel-mixing
branch ``scaling * B @ (A @ dropout(x))`` evaluated at every output site, with
``A: [r, C_in]``, ``B: [C_out, r]`` and ``scaling = alpha / r``.  For a strided
k=3 conv the branch reads the window centres, i.e. the input subsampled by the
stride.  The branch equals adding ``scaling * B @ A`` to the kernel's centre tap,
so for k=1 layers the adapter can be folded into the weights exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .backbone import ConvSpec, config_from_store, conv_layer_map
from .checkpoint import MAGIC_ADAPTER, Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .params import ParamStore
from .rng import SplitMix64
from .tensor_core import Tensor, conv1x1, conv3d, dropout, mul


class Placement(str, Enum):
    ENCODER_ONLY = "encoder_only"
    ENCODER_AND_DECODER = "encoder_decoder"

    @property
    def prefixes(self) -> tuple[str, ...]:
        return ("encoder.",) if self is Placement.ENCODER_ONLY else ("encoder.", "decoder.")


class LoRAError(ValueError):
    pass


class MergeError(LoRAError):
    pass


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 2
    alpha: float = 4.0
    dropout_p: float = 0.1
    placement: Placement = Placement.ENCODER_AND_DECODER
    target_layer_pattern: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.target_layer_pattern is not None:
            object.__setattr__(self, "target_layer_pattern", tuple(self.target_layer_pattern))
        if self.rank < 1:
            raise LoRAError("rank must be positive")
        if self.alpha <= 0:
            raise LoRAError("alpha must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise LoRAError("dropout_p must lie in [0, 1)")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def prefixes(self) -> tuple[str, ...]:
        return self.target_layer_pattern if self.target_layer_pattern is not None else self.placement.prefixes


def resolve_targets(store: ParamStore, config: LoRAConfig) -> list[ConvSpec]:
    layers = conv_layer_map(config_from_store(store))
    targets = [layers[n] for n in sorted(layers) if n.startswith(config.prefixes)]
    if not targets:
        raise LoRAError(f"no conv layer matches target prefixes {config.prefixes}")
    too_small = [f"{s.name} (C_in={s.c_in}, C_out={s.c_out})" for s in targets if config.rank > min(s.c_in, s.c_out)]
    if too_small:
        raise LoRAError(f"rank {config.rank} exceeds min(C_in, C_out) for: {', '.join(too_small)}")
    return targets


def adapted_conv_forward(x, weight, bias, lora_a, lora_b, scaling: float, dropout_p: float = 0.0,
                         training: bool = False, rng: SplitMix64 | None = None,
                         stride: int = 1, padding: int | None = None) -> Tensor:
    """``conv(x; W) + scaling * conv1x1(conv1x1(dropout(x), A), B)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    k = weight.shape[-1]
    padding = k // 2 if padding is None else padding
    base = conv3d(x, weight, bias, stride=stride, padding=padding)
    h = x
    if training and dropout_p > 0.0:
        if rng is None:
            raise LoRAError("training-mode dropout needs a random stream")
        h = dropout(x, rng.bernoulli_mask(x.shape, 1.0 - dropout_p), dropout_p)
    low = conv1x1(conv1x1(h, lora_a, stride=stride), lora_b)
    if low.shape != base.shape:
        raise LoRAError(f"low-rank branch shape {low.shape} != conv output {base.shape}")
    return base + mul(low, scaling)


@dataclass
class LoRAAdapter:
    task_id: str
    config: LoRAConfig
    params: ParamStore
    layers: dict[str, ConvSpec] = field(default_factory=dict)
    merged: bool = False

    @property
    def scaling(self) -> float:
        return self.config.scaling

    def target_names(self) -> list[str]:
        return sorted(self.layers)

    def targets(self, name: str) -> bool:
        return name in self.layers

    def A(self, name: str) -> Tensor:
        return self.params[f"{name}.lora_A"]

    def B(self, name: str) -> Tensor:
        return self.params[f"{name}.lora_B"]

    def delta_w(self, name: str) -> np.ndarray:
        """Effective channel-mixing update ``scaling * B @ A`` of one layer."""
        return self.scaling * (self.B(name).data @ self.A(name).data)

    def conv_forward(self, name, x, weight, bias, stride, padding, training, rng):
        return adapted_conv_forward(x, weight, bias, self.A(name), self.B(name), self.scaling,
                                    self.config.dropout_p, training, rng, stride, padding)

    def num_params(self) -> int:
        return self.params.num_params()

    def digest(self) -> str:
        return self.params.digest()


def create_adapter(store: ParamStore, config: LoRAConfig, seed: int, task_id: str = "task") -> LoRAAdapter:
    """Fresh adapter: ``A ~ N(0, (1/r)^2)``, ``B = 0``; the backbone is not touched."""
    targets = resolve_targets(store, config)
    rng = SplitMix64(seed)
    params = ParamStore()
    r = config.rank
    for spec in targets:
        params.add(f"{spec.name}.lora_A", rng.normal((r, spec.c_in), scale=1.0 / r))
        params.add(f"{spec.name}.lora_B", np.zeros((spec.c_out, r)))
    return LoRAAdapter(task_id, config, params, {s.name: s for s in targets})


def merge_adapter(store: ParamStore, adapter: LoRAAdapter) -> ParamStore:
    """Copy of ``store`` with ``scaling * B @ A`` folded into each targeted k=1 kernel."""
    if adapter.merged:
        raise MergeError(f"adapter {adapter.task_id!r} has already been merged")
    missing = [n for n in adapter.target_names() if f"{n}.weight" not in store]
    if missing:
        raise MergeError(f"adapter targets layers absent from store: {missing}")
    refused = [n for n in adapter.target_names() if store[f"{n}.weight"].shape[-1] != 1]
    if refused:
        raise MergeError(f"cannot merge into k>1 layers (parallel branch only): {refused}")
    out = store.copy()
    for name in adapter.target_names():
        w = out[f"{name}.weight"].data.copy()
        w[:, :, 0, 0, 0] += adapter.delta_w(name)
        out.set_array(f"{name}.weight", w, allow_frozen=True)
    done = [t for t in out.metadata.get("merged_adapters", "").split(",") if t]
    out.metadata["merged_adapters"] = ",".join(done + [adapter.task_id])
    adapter.merged = True
    return out


def count_trainable(store: ParamStore | None, adapter: LoRAAdapter | None = None,
                    head: ParamStore | None = None) -> dict:
    adapter_params = adapter.num_params() if adapter is not None else 0
    head_params = head.num_params() if head is not None else 0
    backbone_params = 0
    if store is not None:
        backbone_params = store.num_params([n for n in store.names() if not n.startswith("head.")])
    trainable = adapter_params + head_params
    fraction = trainable / backbone_params if backbone_params else 0.0
    return {
        "adapter_params": adapter_params,
        "head_params": head_params,
        "backbone_params": backbone_params,
        "trainable_params": trainable,
        "fraction": fraction,
    }


def analytic_adapter_params(targets, rank: int) -> int:
    return sum(rank * (s.c_in + s.c_out) for s in targets)


def save_adapter(adapter: LoRAAdapter, path) -> None:
    cfg = adapter.config
    meta = {
        "task_id": adapter.task_id,
        "rank": str(cfg.rank),
        "alpha": repr(float(cfg.alpha)),
        "dropout_p": repr(float(cfg.dropout_p)),
        "placement": cfg.placement.value,
        "target_layer_pattern": json.dumps(list(cfg.target_layer_pattern) if cfg.target_layer_pattern else None),
        "layers": json.dumps({n: [s.c_in, s.c_out, s.k, s.stride] for n, s in sorted(adapter.layers.items())}),
        "merged": "1" if adapter.merged else "0",
    }
    ckpt = Checkpoint({n: t.data.copy() for n, t in adapter.params.items()}, meta, magic=MAGIC_ADAPTER)
    write_checkpoint(ckpt, path)


def load_adapter(path, store: ParamStore | None = None, config: LoRAConfig | None = None) -> LoRAAdapter:
    """Read an adapter file.

    ``config``, when given, must agree with the stored rank/alpha/placement;
    ``store``, when given, must contain every targeted layer with matching
    channel counts.  Loaded adapter parameters are frozen.
    """
    ckpt = read_checkpoint(path, MAGIC_ADAPTER)
    md = ckpt.metadata
    try:
        pattern = json.loads(md["target_layer_pattern"])
        cfg = LoRAConfig(int(md["rank"]), float(md["alpha"]), float(md["dropout_p"]), Placement(md["placement"]),
                         tuple(pattern) if pattern else None)
        layers = {n: ConvSpec(n, *v) for n, v in json.loads(md["layers"]).items()}
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"adapter metadata incomplete: {e}") from None
    if config is not None:
        for key in ("rank", "alpha", "placement"):
            if getattr(config, key) != getattr(cfg, key):
                raise LoRAError(f"adapter {key} {getattr(cfg, key)!r} != expected {getattr(config, key)!r}")
    for name, spec in layers.items():
        a, b = ckpt.tensors.get(f"{name}.lora_A"), ckpt.tensors.get(f"{name}.lora_B")
        if a is None or b is None or a.shape != (cfg.rank, spec.c_in) or b.shape != (spec.c_out, cfg.rank):
            raise LoRAError(f"adapter tensors for {name!r} inconsistent with rank {cfg.rank}")
    if store is not None:
        available = conv_layer_map(config_from_store(store))
        for name, spec in layers.items():
            have = available.get(name)
            if have is None or (have.c_in, have.c_out) != (spec.c_in, spec.c_out):
                raise LoRAError(f"adapter layer {name!r} incompatible with backbone")
    params = ckpt.to_store(trainable=False)
    return LoRAAdapter(md["task_id"], cfg, params, layers, merged=md.get("merged") == "1")
