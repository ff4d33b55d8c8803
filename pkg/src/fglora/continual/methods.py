"""Regularisers and buffers used by the EWC, LwF and Replay baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..params import ParamStore
from ..rng import SplitMix64
from ..tensor_core import Tensor, as_tensor, mse_loss, mul, square, sub, tsum


class SnapshotMissingError(RuntimeError):
    pass


def compute_fisher_diag(store: ParamStore, samples: list, sample_loss: Callable,
                        n_batches: int | None = None) -> dict[str, np.ndarray]:
    """Diagonal empirical Fisher over the trainable parameters of ``store``.

    Mean over single-sample batches of the squared loss gradient.
    ``sample_loss(x, y)`` must build the loss through ``store``'s tensors.
    """
    if not samples:
        raise ValueError("compute_fisher_diag: no samples")
    use = samples if n_batches is None else samples[:n_batches]
    params = [(n, t) for n, t in store.items() if t.requires_grad]
    fisher = {n: np.zeros_like(t.data) for n, t in params}
    for x, y in use:
        store.zero_grad()
        sample_loss(x, y).backward()
        for n, t in params:
            fisher[n] += t.grad * t.grad
    for n in fisher:
        fisher[n] /= len(use)
    store.zero_grad()
    return fisher


def ewc_penalty(store: ParamStore, anchor: dict[str, np.ndarray], fisher: dict[str, np.ndarray]) -> Tensor:
    """``sum_i F_i (theta_i - theta*_i)^2`` over the anchored names."""
    total = None
    for name in sorted(anchor):
        theta = store[name]
        if anchor[name].shape != theta.shape or fisher[name].shape != theta.shape:
            raise ValueError(f"ewc: shape mismatch for {name!r}")
        term = tsum(mul(square(sub(theta, anchor[name])), fisher[name]))
        total = term if total is None else total + term
    return total if total is not None else as_tensor(0.0)


def ewc_loss(task_loss: Tensor, store: ParamStore, anchor, fisher, lam: float) -> Tensor:
    return task_loss + mul(ewc_penalty(store, anchor, fisher), lam / 2.0)


def lwf_loss(task_loss: Tensor, old_features, new_features: Tensor, distill_weight: float) -> Tensor:
    """``task_loss + w * MSE(new_features, old_features)``; old features come from a frozen snapshot."""
    if old_features is None:
        raise SnapshotMissingError("LwF needs features from a snapshot taken before this task")
    old = as_tensor(old_features.data if isinstance(old_features, Tensor) else old_features)
    return task_loss + mul(mse_loss(new_features, old), distill_weight)


@dataclass
class ReplayBuffer:
    """Stored prior-task inputs with the snapshot model's outputs on them."""

    kind: str = ""
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    def add(self, x: np.ndarray, y: np.ndarray) -> None:
        self.inputs.append(np.array(x, dtype=np.float64))
        self.outputs.append(np.array(y, dtype=np.float64))

    def sample(self, batch_size: int, rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(len(self.inputs), size=min(batch_size, len(self.inputs)))
        return np.stack([self.inputs[i] for i in idx]), np.stack([self.outputs[i] for i in idx])


def replay_train_step(task_loss: Tensor, buffer: ReplayBuffer | None, predict: Callable,
                      distill_weight: float, batch_size: int, rng: SplitMix64,
                      on_read: Callable[[int], None] | None = None) -> Tensor:
    """``task_loss + w * MSE(predict(replayed inputs), stored outputs)``.

    An empty (or absent) buffer contributes nothing and the plain task loss is
    returned unchanged.
    """
    if buffer is None or len(buffer) == 0:
        return task_loss
    xs, ys = buffer.sample(batch_size, rng)
    if on_read is not None:
        on_read(len(xs))
    current = predict(Tensor(xs))
    return task_loss + mul(mse_loss(current, ys), distill_weight)
