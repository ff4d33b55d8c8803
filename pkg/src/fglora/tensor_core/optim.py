from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def adam_step(params, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place.

    ``params`` is a ParamStore or an iterable of ``(name, Tensor)`` pairs.  Every
    entry must be trainable and carry a gradient; a frozen entry is an error and
    nothing is modified in that case.
    """
    from ..params import FrozenParameterError

    items = list(params.items()) if hasattr(params, "items") else list(params)
    for name, t in items:
        if not t.requires_grad:
            raise FrozenParameterError(f"adam_step: parameter {name!r} is frozen")
        if t.grad is None:
            raise MissingGradientError(f"adam_step: parameter {name!r} has no gradient")

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for name, t in items:
        g = t.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(t.data)
            state.second_moment[name] = np.zeros_like(t.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data = t.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
