"""Evaluation metrics, backward transfer, and the paired statistical tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from .rng import SplitMix64


class MetricKind(str, Enum):
    DICE = "dice"
    MAE = "mae"

    @property
    def higher_is_better(self) -> bool:
        return self is MetricKind.DICE


@dataclass(frozen=True)
class MetricValue:
    kind: MetricKind
    value: float

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if self.kind is MetricKind.DICE and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"Dice must lie in [0, 1], got {self.value}")
        if self.kind is MetricKind.MAE and self.value < 0:
            raise ValueError(f"MAE must be non-negative, got {self.value}")

    @property
    def higher_is_better(self) -> bool:
        return self.kind.higher_is_better

    def render(self) -> str:
        return fmt_metric(self.value, self.kind)


def fmt_metric(value: float, kind: MetricKind | str) -> str:
    """Two decimals for Dice and BWT, three for MAE."""
    return f"{value:.3f}" if MetricKind(kind) is MetricKind.MAE else f"{value:.2f}"


def dice(pred_mask, gt_mask, smooth: float = 1e-8) -> float:
    """``(2|P & G| + smooth) / (|P| + |G| + smooth)``; two empty masks score 1."""
    p = np.asarray(pred_mask, dtype=np.float64)
    g = np.asarray(gt_mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dice: shape mismatch {p.shape} vs {g.shape}")
    for name, m in (("pred", p), ("gt", g)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"dice: {name} mask is not binary")
    if smooth < 0:
        raise ValueError("smooth must be non-negative")
    inter = float((p * g).sum())
    total = float(p.sum() + g.sum())
    if total == 0.0 and smooth == 0.0:
        return 1.0
    return (2.0 * inter + smooth) / (total + smooth)


def mae(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("mae: empty input")
    if p.size != t.size:
        raise ValueError(f"mae: length mismatch {p.size} vs {t.size}")
    return float(np.mean(np.abs(p - t)))


# ---------------------------------------------------------------- result matrix / BWT

class ResultMatrix:
    """``R[i][j]``: metric of task ``j`` after training through task ``i`` (0-based)."""

    def __init__(self, task_ids: list[str], kinds: list[MetricKind | str]):
        if len(task_ids) != len(kinds):
            raise ValueError("one metric kind per task")
        self.task_ids = list(task_ids)
        self.kinds = [MetricKind(k) for k in kinds]
        self._cells: dict[tuple[int, int], float] = {}

    def __len__(self) -> int:
        return len(self.task_ids)

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise ValueError(f"R[{i}][{j}]: task {j} is not trained yet after task {i}")
        self._cells[(i, j)] = float(value)

    def get(self, i: int, j: int) -> float:
        try:
            return self._cells[(i, j)]
        except KeyError:
            raise KeyError(f"R[{i}][{j}] not populated") from None

    def __contains__(self, ij) -> bool:
        return tuple(ij) in self._cells

    def rows(self) -> list[list[float | None]]:
        n = len(self)
        return [[self._cells.get((i, j)) for j in range(n)] for i in range(n)]

    def to_dict(self) -> dict:
        return {"task_ids": self.task_ids, "kinds": [k.value for k in self.kinds], "R": self.rows()}


def bwt(R, k: int, T: int | None = None) -> float:
    """``R[T][k] - R[k][k]`` for task ``k`` after training through task ``T``.

    For Dice a negative value is forgetting; for MAE a positive value is
    forgetting.  The difference itself is the same expression in both cases.
    """
    if isinstance(R, ResultMatrix):
        T = len(R) - 1 if T is None else T
        return R.get(T, k) - R.get(k, k)
    T = len(R) - 1 if T is None else T
    try:
        after, at = R[T][k], R[k][k]
    except (IndexError, KeyError):
        raise KeyError(f"R[{T}][{k}] or R[{k}][{k}] missing") from None
    if after is None or at is None:
        raise KeyError(f"R[{T}][{k}] or R[{k}][{k}] missing")
    return after - at


def forgetting_convention(kind: MetricKind | str) -> str:
    return "negative = forgetting" if MetricKind(kind).higher_is_better else "positive = forgetting"


# ---------------------------------------------------------------- Wilcoxon signed-rank

def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """``counts[s]``: number of sign assignments whose doubled positive-rank sum is ``s``."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


EXACT_MAX_N = 25


def wilcoxon_signed_rank(residuals) -> dict:
    """Two-sided signed-rank test of zero median on paired residuals.

    Zeros are dropped, ties share average ranks.  For ``n <= 25`` the p-value is
    exact: ``2 * min(P(T+ <= t), P(T+ >= t))`` under the distribution of ``T+``
    over all ``2**n`` equally likely sign assignments.  Larger samples use the
    normal approximation with tie-corrected variance and continuity correction.
    ``statistic`` is ``min(T+, T-)``.
    """
    d = np.asarray(residuals, dtype=np.float64).reshape(-1)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValueError("wilcoxon: all residuals are zero")
    if n < 5:
        raise ValueError(f"wilcoxon: need at least 5 nonzero residuals, got {n}")
    ranks = _average_ranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    t_minus = float(ranks[d < 0].sum())
    statistic = min(t_plus, t_minus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null_counts(doubled)
        s = int(round(2 * t_plus))
        total = 2 ** n
        lower = sum(counts[: s + 1])
        upper = sum(counts[s:])
        p = min(1.0, 2.0 * float(min(lower, upper)) / total)
        return {"statistic": statistic, "t_plus": t_plus, "n": n, "p_two_sided": p, "method": "exact"}
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    diff = t_plus - mean
    z = (abs(diff) - 0.5) / math.sqrt(var) if abs(diff) > 0.5 else 0.0
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return {"statistic": statistic, "t_plus": t_plus, "n": n, "p_two_sided": p, "z": z, "method": "normal"}


# ---------------------------------------------------------------- paired t / bootstrap

def paired_t_test(a, b) -> dict:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError("paired_t_test: unequal lengths")
    n = a.size
    if n < 2:
        raise ValueError("paired_t_test: need at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ValueError("paired_t_test: differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    df = n - 1
    p = float(2.0 * special.stdtr(df, -abs(t)))
    return {"t": t, "df": df, "p_two_sided": p}


def bootstrap_ci(diffs, n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``diffs``."""
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("bootstrap_ci: empty input")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = SplitMix64(seed)
    idx = rng.integers(d.size, size=(n_boot, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# ---------------------------------------------------------------- seed aggregation

@dataclass(frozen=True)
class SeedAggregate:
    values: tuple[float, ...]
    mean: float
    std: float

    def render(self, kind: MetricKind | str = MetricKind.DICE) -> str:
        return f"{fmt_metric(self.mean, kind)} ± {fmt_metric(self.std, kind)}"


def aggregate_seeds(values) -> SeedAggregate:
    v = tuple(float(x) for x in values)
    if not v:
        raise ValueError("aggregate_seeds: no values")
    # fsum keeps the result independent of value order
    mean = math.fsum(v) / len(v)
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in v) / (len(v) - 1)) if len(v) > 1 else 0.0
    return SeedAggregate(v, mean, std)
