"""Task-sequence training: adapter isolation and the five baselines.

``run_schedule`` trains the tasks of a :class:`Schedule` in order and, after
task ``i``, evaluates every task ``j <= i`` on its validation split, filling
``R[i][j]``.  Per-task artifacts are written to
``<out_dir>/<schedule>/<seed>/<task_id>/``.
"""

from __future__ import annotations

import json
import logging
import re
import resource
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import backbone as bb
from ..checkpoint import Checkpoint, encode, file_hash, load_checkpoint, save_checkpoint
from ..lora import LoRAAdapter, LoRAConfig, Placement, create_adapter, load_adapter, save_adapter
from ..metrics import MetricKind, ResultMatrix, dice, mae
from ..params import FrozenParameterError, ParamStore
from ..rng import SplitMix64, derive_seed
from ..synthdata import patch_extract
from ..tensor_core import AdamState, Tensor, adam_step, dice_bce_loss, mse_loss, no_grad
from .config import Method, Schedule, TaskKind, TaskSpec
from .data import AccessContext, DataHandle, TaskDataset
from .methods import ReplayBuffer, compute_fisher_diag, ewc_loss, lwf_loss, replay_train_step

log = logging.getLogger(__name__)

EVAL_BATCH = 8


class DivergenceError(RuntimeError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class TaskLog:
    task_id: str
    losses: list[float] = field(default_factory=list)
    digests: list[str] = field(default_factory=list)
    trainable_names: list[str] = field(default_factory=list)
    trainable_params: int = 0
    wall_time: float = 0.0
    peak_rss_mb: float = 0.0
    prior_reads: int = 0


@dataclass
class ScheduleResult:
    schedule: Schedule
    seed: int
    R: ResultMatrix
    logs: list[TaskLog]
    backbone: ParamStore
    adapters: dict[str, LoRAAdapter]
    heads: dict[str, ParamStore]
    model: ParamStore | None
    out_dir: Path | None
    file_hashes: list[dict[str, str]]
    label: str = ""

    def predict(self, task_id: str, volume) -> np.ndarray | float:
        kind = self.schedule.tasks[[t.task_id for t in self.schedule.tasks].index(task_id)].kind
        if self.model is not None:
            return infer(self.model, None, None, volume, kind)
        return infer(self.backbone, self.adapters[task_id], self.heads[task_id], volume, kind)


def schedule_name(schedule: Schedule) -> str:
    raw = f"{schedule.method.label}_{schedule.order_label}"
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", raw).strip("-")


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


# ---------------------------------------------------------------- inference

def _forward(kind: TaskKind, store, x, adapter=None, head=None, training=False, rng=None) -> Tensor:
    if kind is TaskKind.SEGMENTATION:
        return bb.forward_seg(store, x, adapter, head, training, rng)
    return bb.forward_reg(store, x, adapter, head, training, rng)


def infer(backbone: ParamStore, adapter: LoRAAdapter | None, head: ParamStore | None, volume, kind) -> np.ndarray | float:
    """Binary mask (``sigmoid(logit) > 0.5``, so a logit of exactly 0 maps to 0) or a scalar."""
    kind = TaskKind(kind)
    with no_grad():
        out = _forward(kind, backbone, Tensor(volume), adapter, head).data
    if kind is TaskKind.SEGMENTATION:
        return (out > 0.0).astype(np.float64)
    return float(out.reshape(-1)[0]) if out.size == 1 else out.reshape(-1)


def load_task_artifacts(task_dir, backbone_path=None):
    """(backbone, adapter, head, kind) reloaded from a task artifact directory."""
    task_dir = Path(task_dir)
    head_path = task_dir / "head.fgls"
    if not head_path.exists():
        raise MissingArtifactError(f"missing {head_path}")
    head = load_checkpoint(head_path)
    kind = TaskKind.SEGMENTATION if "head.seg.weight" in head else TaskKind.REGRESSION
    model_path = task_dir / "model.fgls"
    if model_path.exists():
        return load_checkpoint(model_path), None, None, kind
    backbone_path = Path(backbone_path) if backbone_path else task_dir.parent / "backbone.fgls"
    adapter_path = task_dir / "adapter.fgla"
    for p in (backbone_path, adapter_path):
        if not p.exists():
            raise MissingArtifactError(f"missing {p}")
    backbone = load_checkpoint(backbone_path)
    return backbone, load_adapter(adapter_path, store=backbone), head, kind


# ---------------------------------------------------------------- runner

class _Runner:
    def __init__(self, schedule: Schedule, datasets: dict[str, TaskDataset], backbone: ParamStore,
                 seed: int, out_dir: Path | None, patch_size: int):
        self.schedule = schedule
        self.method = schedule.method
        self.datasets = datasets
        self.seed = seed
        self.patch = patch_size
        self.cfg = bb.config_from_store(backbone)
        self.out_dir = out_dir
        self.ctx = AccessContext(allow_prior=self.method.variant is Method.REPLAY)
        self.tasks = list(schedule.tasks)
        self.R = ResultMatrix([t.task_id for t in self.tasks], [t.kind.metric for t in self.tasks])
        self.logs: list[TaskLog] = []
        self.file_hashes: list[dict[str, str]] = []
        self.adapters: dict[str, LoRAAdapter] = {}
        self.heads: dict[str, ParamStore] = {}
        self.handles: list[DataHandle] = []
        self._eval_cache: dict[str, tuple] = {}
        # method state
        self.anchor: dict[str, np.ndarray] | None = None
        self.fisher: dict[str, np.ndarray] | None = None
        self.snapshot: ParamStore | None = None
        self.buffer: ReplayBuffer | None = None
        self.buffer_kind: TaskKind | None = None

        if self.method.variant is Method.LORA:
            self.backbone = backbone.copy()
            self.backbone.freeze_all()
            self.model = None
        else:
            self.backbone = backbone
            self.model = backbone.copy()
            self.model.freeze_all()

    # -- paths
    @property
    def run_dir(self) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / schedule_name(self.schedule) / str(self.seed)

    def task_dir(self, spec: TaskSpec) -> Path | None:
        return None if self.run_dir is None else self.run_dir / spec.task_id

    # -- model access
    def forward(self, idx: int, x, training=False, rng=None) -> Tensor:
        spec = self.tasks[idx]
        if self.model is not None:
            return _forward(spec.kind, self.model, x, training=training, rng=rng)
        return _forward(spec.kind, self.backbone, x, self.adapters[spec.task_id], self.heads[spec.task_id],
                        training, rng)

    def lora_config_for(self, spec: TaskSpec) -> LoRAConfig:
        cfg = self.method.lora
        if spec.kind is TaskKind.REGRESSION and cfg.target_layer_pattern is None:
            # the regression head reads the bottleneck only; decoder adapters would get no gradient
            from dataclasses import replace
            cfg = replace(cfg, placement=Placement.ENCODER_ONLY)
        return cfg

    def _setup_task(self, idx: int) -> list[tuple[str, Tensor]]:
        spec = self.tasks[idx]
        head = bb.build_head(spec.kind.head, self.cfg, seed=derive_seed(self.seed, spec.task_id, "head"))
        v = self.method.variant
        if v is Method.LORA:
            adapter = create_adapter(self.backbone, self.lora_config_for(spec),
                                     seed=derive_seed(self.seed, spec.task_id, "adapter"), task_id=spec.task_id)
            self.adapters[spec.task_id] = adapter
            self.heads[spec.task_id] = head
            return list(adapter.params.items()) + list(head.items())
        self.model.update(head)
        self.heads[spec.task_id] = head
        prefix = f"head.{spec.kind.head}."
        if v is Method.SEQ_LINEAR:
            prefixes = [prefix] + (["decoder."] if spec.kind is TaskKind.SEGMENTATION else [])
        else:
            prefixes = ["encoder.", "decoder.", prefix]
        self.model.set_trainable(prefixes)
        return [(n, t) for n, t in self.model.items() if t.requires_grad]

    def _frozen_watch(self, trainable_ids: set[int]) -> dict[str, str]:
        stores = [self.model] if self.model is not None else (
            [self.backbone] + [a.params for a in self.adapters.values()] + list(self.heads.values()))
        watch = {}
        for i, s in enumerate(stores):
            for n, t in s.items():
                if id(t) not in trainable_ids:
                    watch[f"{i}:{n}"] = s.hash(n)
        return watch

    def _check_watch(self, watch: dict[str, str], trainable_ids: set[int]) -> None:
        now = self._frozen_watch(trainable_ids)
        changed = [k for k, h in watch.items() if now.get(k) != h]
        if changed:
            raise FrozenParameterError(f"frozen parameters changed during training: {changed[:5]}")

    def _digest(self, trainable) -> str:
        import hashlib
        h = hashlib.blake2b(digest_size=8)
        for n, t in trainable:
            h.update(n.encode() + np.ascontiguousarray(t.data, "<f8").tobytes())
        return h.hexdigest()

    # -- data
    def _fixed_samples(self, spec: TaskSpec, items, tag: str):
        out = []
        for it in items:
            x, y = patch_extract(it, self.patch, derive_seed(self.seed, spec.task_id, tag, it.subject_id))
            out.append((x, y))
        return out

    def _loss(self, idx: int, out: Tensor, y) -> Tensor:
        spec = self.tasks[idx]
        if spec.kind is TaskKind.SEGMENTATION:
            return dice_bce_loss(out, y)
        return mse_loss(out, np.asarray(y, dtype=np.float64).reshape(-1, 1))

    # -- training
    def train_task(self, idx: int) -> TaskLog:
        spec = self.tasks[idx]
        ds = self.datasets[spec.task_id]
        if ds.kind is not spec.kind:
            raise ValueError(f"dataset kind {ds.kind} does not match task {spec.task_id} ({spec.kind})")
        self.ctx.begin(idx)
        handle = DataHandle(ds, ds.few_shot_ids(spec.n_shot, self.seed), idx, self.ctx)
        self.handles.append(handle)
        items = [handle.read(i) for i in range(len(handle))]

        t0 = time.perf_counter()
        trainable = self._setup_task(idx)
        ids = {id(t) for _, t in trainable}
        tlog = TaskLog(spec.task_id, trainable_names=sorted(n for n, _ in trainable),
                       trainable_params=int(sum(t.size for _, t in trainable)))
        watch = self._frozen_watch(ids)
        state = AdamState(lr=spec.lr)
        rng = SplitMix64(derive_seed(self.seed, spec.task_id, "train"))
        drop_rng = SplitMix64(derive_seed(self.seed, spec.task_id, "dropout"))
        replay_rng = SplitMix64(derive_seed(self.seed, spec.task_id, "replay-sample"))
        v = self.method.variant
        w = self.method.distill_weight

        for epoch in range(spec.epochs):
            order = rng.permutation(len(items))
            losses = []
            for b in range(0, len(order), spec.batch_size):
                batch = [items[i] for i in order[b:b + spec.batch_size]]
                pairs = [patch_extract(it, self.patch, rng) for it in batch]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs]) if spec.kind is TaskKind.SEGMENTATION else [p[1] for p in pairs]
                for _, t in trainable:
                    t.grad = np.zeros_like(t.data)
                x = Tensor(xb)
                loss = self._loss(idx, self.forward(idx, x, training=True, rng=drop_rng), yb)
                if v is Method.EWC and self.anchor is not None:
                    loss = ewc_loss(loss, self.model, self.anchor, self.fisher, self.method.ewc_lambda)
                elif v is Method.LWF and idx > 0:
                    with no_grad():
                        old = bb.forward_encoder(self.snapshot, x)
                    loss = lwf_loss(loss, old, bb.forward_encoder(self.model, x), w)
                elif v is Method.REPLAY and idx > 0:
                    kind = self.buffer_kind
                    loss = replay_train_step(
                        loss, self.buffer,
                        lambda xs: _forward(kind, self.model, xs),
                        w, spec.batch_size, replay_rng, on_read=self.ctx.note_prior_read,
                    )
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"{spec.task_id}: non-finite loss at epoch {epoch}")
                loss.backward()
                adam_step(trainable, state)
                losses.append(value)
            tlog.losses.append(float(np.mean(losses)))
            tlog.digests.append(self._digest(trainable))
            self._check_watch(watch, ids)
            log.debug("%s epoch %d loss %.5f", spec.task_id, epoch + 1, tlog.losses[-1])

        self._finish_task(idx, items)
        tlog.wall_time = time.perf_counter() - t0
        tlog.peak_rss_mb = _peak_rss_mb()
        tlog.prior_reads = self.ctx.prior_reads.get(idx, 0)
        handle.revoke()
        self.logs.append(tlog)
        return tlog

    def _finish_task(self, idx: int, items) -> None:
        spec = self.tasks[idx]
        v = self.method.variant
        if v is Method.LORA:
            self.adapters[spec.task_id].params.freeze_all()
            self.heads[spec.task_id].freeze_all()
        else:
            self.model.freeze_all()
        if v is Method.EWC:
            fixed = self._fixed_samples(spec, items, "fisher")
            self.model.set_trainable(["encoder.", "decoder."])

            def sample_loss(x, y):
                xt = Tensor(x[None])
                yy = y[None] if spec.kind is TaskKind.SEGMENTATION else [y]
                return self._loss(idx, self.forward(idx, xt), yy)

            self.fisher = compute_fisher_diag(self.model, fixed, sample_loss, self.method.fisher_batches)
            self.anchor = {n: self.model[n].data.copy() for n in self.fisher}
            self.model.freeze_all()
        elif v is Method.LWF:
            self.snapshot = self.model.copy()
            self.snapshot.freeze_all()
        elif v is Method.REPLAY:
            size = spec.n_shot // 2 if self.method.buffer_size is None else self.method.buffer_size
            perm = SplitMix64(derive_seed(self.seed, spec.task_id, "buffer")).permutation(len(items))
            chosen = [items[i] for i in perm[:size]]
            self.buffer = ReplayBuffer(spec.kind.value)
            self.buffer_kind = spec.kind
            with no_grad():
                for x, _ in self._fixed_samples(spec, chosen, "buffer"):
                    self.buffer.add(x, self.forward(idx, Tensor(x[None])).data[0])
        self._save_task(idx)

    # -- persistence
    def _save_task(self, idx: int) -> None:
        spec = self.tasks[idx]
        d = self.task_dir(spec)
        if d is None:
            return
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.heads[spec.task_id], d / "head.fgls", {"task_id": spec.task_id, "kind": spec.kind.value})
        if self.model is not None:
            save_checkpoint(self.model, d / "model.fgls", {"task_id": spec.task_id})
        else:
            save_adapter(self.adapters[spec.task_id], d / "adapter.fgla")

    def record_hashes(self) -> dict[str, str]:
        if self.run_dir is None:
            return {}
        return {str(p.relative_to(self.run_dir)): file_hash(p)
                for p in sorted(self.run_dir.rglob("*")) if p.suffix in (".fgls", ".fgla")}

    # -- evaluation
    def _eval_data(self, spec: TaskSpec):
        if spec.task_id not in self._eval_cache:
            self._eval_cache[spec.task_id] = self.datasets[spec.task_id].eval_patches(self.patch)
        return self._eval_cache[spec.task_id]

    def evaluate(self, j: int) -> tuple[float, int]:
        spec = self.tasks[j]
        vols, labels = self._eval_data(spec)
        outs = []
        with no_grad():
            for b in range(0, len(vols), EVAL_BATCH):
                outs.append(self.forward(j, Tensor(vols[b:b + EVAL_BATCH])).data)
        out = np.concatenate(outs)
        if spec.kind is TaskKind.SEGMENTATION:
            preds = (out > 0.0).astype(np.float64)
            return float(np.mean([dice(p, g) for p, g in zip(preds, labels)])), len(labels)
        return mae(out.reshape(-1), labels), len(labels)

    def write_metrics(self, i: int, rows: list[dict]) -> None:
        d = self.task_dir(self.tasks[i])
        if d is not None:
            (d / "metrics.json").write_text(json.dumps(rows, indent=2, sort_keys=True))


def run_schedule(schedule: Schedule, datasets: dict[str, TaskDataset], backbone: ParamStore, seed: int,
                 out_dir=None, patch_size: int | None = None) -> ScheduleResult:
    """Train ``schedule`` with ``seed`` on top of a (pretrained) backbone."""
    cfg = bb.config_from_store(backbone)
    runner = _Runner(schedule, datasets, backbone, seed, Path(out_dir) if out_dir else None,
                     patch_size or cfg.patch_size)
    if runner.run_dir is not None:
        runner.run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(runner.backbone, runner.run_dir / "backbone.fgls")
    for i, spec in enumerate(runner.tasks):
        log.info("[%s seed %d] training %s (%s)", schedule_name(schedule), seed, spec.task_id, spec.kind.value)
        runner.train_task(i)
        rows = []
        for j in range(i + 1):
            value, n = runner.evaluate(j)
            runner.R.set(i, j, value)
            rows.append({"task_id": runner.tasks[j].task_id, "metric_kind": runner.tasks[j].kind.metric,
                         "value": value, "n_samples": n, "seed": seed, "after_task": spec.task_id})
        runner.write_metrics(i, rows)
        runner.file_hashes.append(runner.record_hashes())
    return ScheduleResult(schedule, seed, runner.R, runner.logs, runner.backbone, runner.adapters, runner.heads,
                          runner.model, runner.run_dir, runner.file_hashes, schedule_name(schedule))


def encoded_hash(store_or_adapter) -> str:
    """Hash of the bytes the object would serialise to (for in-memory vs on-disk checks)."""
    import hashlib
    if isinstance(store_or_adapter, LoRAAdapter):
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            p = Path(tmp) / "a.fgla"
            save_adapter(store_or_adapter, p)
            return file_hash(p)
    return hashlib.blake2b(encode(Checkpoint.from_store(store_or_adapter)), digest_size=8).hexdigest()
