"""Task datasets and the no-replay access contract.

Training samples are only reachable through a :class:`DataHandle`.  A handle
belongs to one task; reading it while another task is training is a prior-task
read.  Only Replay may do that (each such read is counted); for every other
method it raises :class:`DataAccessViolation`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import derive_seed
from ..synthdata import DatasetManifest, LabeledVolume, few_shot_sample, patch_extract
from .config import TaskKind


class DataAccessViolation(RuntimeError):
    pass


@dataclass
class TaskDataset:
    kind: TaskKind
    items: dict[str, LabeledVolume]
    manifest: DatasetManifest
    data_seed: int = 0

    def __post_init__(self):
        self.kind = TaskKind(self.kind)

    def few_shot_ids(self, n_shot: int, seed: int) -> list[str]:
        return few_shot_sample(self.manifest, n_shot, seed)

    def eval_patches(self, patch_size: int) -> tuple[np.ndarray, list]:
        """Deterministic validation patches (one per val subject) and labels."""
        vols, labels = [], []
        for sid in self.manifest.val:
            vol, lab = patch_extract(self.items[sid], patch_size, derive_seed(self.data_seed, "eval", sid))
            vols.append(vol)
            labels.append(lab)
        return np.stack(vols), labels


@dataclass
class AccessContext:
    allow_prior: bool
    current: int = -1
    prior_reads: dict[int, int] = field(default_factory=dict)

    def begin(self, task_index: int) -> None:
        self.current = task_index
        self.prior_reads.setdefault(task_index, 0)

    def note_prior_read(self, n: int = 1) -> None:
        if not self.allow_prior:
            raise DataAccessViolation(f"task {self.current} attempted to read prior-task data")
        self.prior_reads[self.current] = self.prior_reads.get(self.current, 0) + n


class DataHandle:
    def __init__(self, dataset: TaskDataset, ids: list[str], owner: int, ctx: AccessContext):
        self.dataset = dataset
        self.ids = list(ids)
        self.owner = owner
        self.ctx = ctx
        self.revoked = False
        self.reads = 0

    def __len__(self) -> int:
        return len(self.ids)

    def read(self, index: int) -> LabeledVolume:
        if self.revoked:
            raise DataAccessViolation(f"data of task {self.owner} was revoked")
        if self.ctx.current != self.owner:
            self.ctx.note_prior_read()
        self.reads += 1
        return self.dataset.items[self.ids[index]]

    def revoke(self) -> None:
        self.revoked = True
