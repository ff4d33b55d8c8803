"""Continual-learning engine: adapter isolation plus the sequential baselines."""

from .config import Method, MethodConfig, Schedule, ScheduleError, TaskKind, TaskSpec
from .data import AccessContext, DataAccessViolation, DataHandle, TaskDataset
from .engine import (
    DivergenceError,
    MissingArtifactError,
    ScheduleResult,
    TaskLog,
    encoded_hash,
    infer,
    load_task_artifacts,
    run_schedule,
    schedule_name,
)
from .methods import (
    ReplayBuffer,
    SnapshotMissingError,
    compute_fisher_diag,
    ewc_loss,
    ewc_penalty,
    lwf_loss,
    replay_train_step,
)

__all__ = [
    "AccessContext", "DataAccessViolation", "DataHandle", "DivergenceError", "Method", "MethodConfig",
    "MissingArtifactError", "ReplayBuffer", "Schedule", "ScheduleError", "ScheduleResult", "SnapshotMissingError",
    "TaskDataset", "TaskKind", "TaskLog", "TaskSpec", "compute_fisher_diag", "encoded_hash", "ewc_loss",
    "ewc_penalty", "infer", "load_task_artifacts", "lwf_loss", "replay_train_step", "run_schedule",
    "schedule_name",
]
