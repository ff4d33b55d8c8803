from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from ..lora import LoRAConfig, Placement


class TaskKind(str, Enum):
    SEGMENTATION = "segmentation"
    REGRESSION = "regression"

    @property
    def metric(self) -> str:
        return "dice" if self is TaskKind.SEGMENTATION else "mae"

    @property
    def head(self) -> str:
        return "seg" if self is TaskKind.SEGMENTATION else "reg"


class Method(str, Enum):
    LORA = "lora"
    SEQ_LINEAR = "seq_linear"
    SEQ_FT = "seq_ft"
    EWC = "ewc"
    LWF = "lwf"
    REPLAY = "replay"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: TaskKind
    n_shot: int = 32
    epochs: int = 30
    in_channels: int = 2
    batch_size: int = 2
    lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.n_shot < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ScheduleError(f"invalid task spec {self}")


@dataclass(frozen=True)
class MethodConfig:
    """Continual-learning method and its knobs.

    ``ewc_lambda`` and ``fisher_batches`` apply to EWC (``fisher_batches=None``
    means every few-shot sample), ``distill_weight`` to LwF and Replay,
    ``buffer_size`` to Replay (``None`` means ``n_shot // 2``).
    """

    variant: Method
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    ewc_lambda: float = 100.0
    fisher_batches: int | None = None
    distill_weight: float = 1.0
    buffer_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Method(self.variant))
        if self.ewc_lambda < 0 or self.distill_weight < 0:
            raise ScheduleError("ewc_lambda and distill_weight must be non-negative")
        if self.fisher_batches is not None and self.fisher_batches < 1:
            raise ScheduleError("fisher_batches must be positive")
        if self.buffer_size is not None and self.buffer_size < 0:
            raise ScheduleError("buffer_size must be non-negative")

    @property
    def label(self) -> str:
        if self.variant is Method.LORA:
            return f"lora[{self.lora.placement.value}]"
        return self.variant.value

    def with_placement(self, placement: Placement) -> "MethodConfig":
        return replace(self, lora=replace(self.lora, placement=Placement(placement)))


@dataclass(frozen=True)
class Schedule:
    tasks: tuple[TaskSpec, ...]
    method: MethodConfig
    order_label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ScheduleError("schedule needs at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ScheduleError(f"task ids must be unique: {ids}")
        if not self.order_label:
            object.__setattr__(self, "order_label", "->".join(ids))
        if self.method.variant is not Method.LORA:
            kinds = [t.kind for t in self.tasks]
            if len(set(kinds)) != len(kinds):
                raise ScheduleError("shared-model methods need one task per kind (one head per kind)")
