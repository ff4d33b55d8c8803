"""Experiment grid, result tables and resource accounting.

An :class:`ExperimentConfig` names the methods, seeds, shot counts and task
order to run.  :func:`run` trains every (method, seed, n_shot) cell with
:func:`fglora.continual.run_schedule` on a shared pretrained backbone and writes

* ``<out>/runs/<schedule>/<seed>/<task>/...`` per-cell artifacts and metrics.json
* ``<out>/results.csv``   one row per cell, deterministic
* ``<out>/table.md``      mean ± std over seeds per method
* ``<out>/resource.json`` trainable parameter counts, wall time, peak RSS
* ``<out>/config.toml``   the effective configuration, defaults included
* ``<out>/run.log``       timestamps and failures (kept out of the CSV)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import backbone as bb
from .checkpoint import load_checkpoint, save_checkpoint
from .continual import (Method, MethodConfig, Schedule, TaskDataset, TaskKind, TaskSpec, run_schedule,
                        schedule_name)
from .lora import LoRAConfig, Placement, count_trainable
from .metrics import MetricKind, aggregate_seeds, bwt, fmt_metric, forgetting_convention
from .params import ParamStore
from .rng import derive_seed
from .synthdata import (gen_reg_dataset, gen_seg_dataset, load_raw_dataset, make_manifest, patch_extract,
                        write_raw_dataset)

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

PAPER_EPOCHS = 100
TASK_IDS = {TaskKind.SEGMENTATION: "seg", TaskKind.REGRESSION: "reg"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class DataConfig:
    n_subjects: int = 200
    size: int = 24
    seg_seed: int = 7
    reg_seed: int = 8
    raw_seg_dir: str | None = None
    raw_reg_dir: str | None = None


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    n_volumes: int = 96
    seed: int = 0
    lr: float = 3e-3


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = ("lora", "seq_linear", "seq_ft", "ewc", "lwf", "replay")
    seeds: tuple[int, ...] = (42, 43, 44)
    n_shots: tuple[int, ...] = (32,)
    task_order: tuple[str, ...] = ("segmentation", "regression")
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 2
    output_dir: str = "runs"
    backbone: bb.UNetConfig = field(default_factory=bb.UNetConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ewc_lambda: float = 100.0
    distill_weight: float = 1.0

    def __post_init__(self):
        for name in ("methods", "seeds", "n_shots", "task_order"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must be a non-empty list")
            object.__setattr__(self, name, value)
        try:
            for m in self.methods:
                Method(m)
            for k in self.task_order:
                TaskKind(k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if len(set(self.task_order)) != len(self.task_order):
            raise ConfigError("task_order must not repeat a task kind")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, lr > 0 and batch_size >= 1 are required")
        if any(n < 1 for n in self.n_shots):
            raise ConfigError("n_shots must be positive")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def method_config(self, method: str) -> MethodConfig:
        return MethodConfig(method, lora=self.lora, ewc_lambda=self.ewc_lambda,
                            distill_weight=self.distill_weight)

    def schedule(self, method: str | MethodConfig, n_shot: int, order=None) -> Schedule:
        mc = method if isinstance(method, MethodConfig) else self.method_config(method)
        tasks = [TaskSpec(TASK_IDS[TaskKind(k)], TaskKind(k), n_shot=n_shot, epochs=self.epochs,
                          in_channels=self.backbone.in_channels, batch_size=self.batch_size, lr=self.lr)
                 for k in (order or self.task_order)]
        return Schedule(tuple(tasks), mc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["placement"] = self.lora.placement.value
        if d["lora"]["target_layer_pattern"] is None:
            del d["lora"]["target_layer_pattern"]
        for section in ("data",):
            d[section] = {k: v for k, v in d[section].items() if v is not None}
        return d


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    sections = {
        "backbone": (bb.UNetConfig, "backbone"),
        "lora": (LoRAConfig, "lora"),
        "data": (DataConfig, "data"),
        "pretrain": (PretrainConfig, "pretrain"),
    }
    kwargs = {key: _section(cls, raw.pop(key, None), name) for key, (cls, name) in sections.items()}
    unknown = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**raw, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r} as TOML")


def dump_config(config: ExperimentConfig) -> str:
    """Render the effective configuration as TOML (read back by :func:`load_config`)."""
    d = config.to_dict()
    lines = []
    tables = {k: v for k, v in d.items() if isinstance(v, dict)}
    for k, v in d.items():
        if k not in tables:
            lines.append(f"{k} = {_toml_value(v)}")
    for name, table in tables.items():
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
    return "\n".join(lines) + "\n"


def paper_scale(config: ExperimentConfig) -> ExperimentConfig:
    return replace(config, epochs=PAPER_EPOCHS)


# ---------------------------------------------------------------- data and backbone

def generate_datasets(config: ExperimentConfig) -> dict[str, TaskDataset]:
    """Task datasets keyed by task id; raw directories take precedence over synthesis."""
    d = config.data
    ch = config.backbone.in_channels
    out = {}
    for kind in config.task_order:
        kind = TaskKind(kind)
        raw_dir = d.raw_seg_dir if kind is TaskKind.SEGMENTATION else d.raw_reg_dir
        seed = d.seg_seed if kind is TaskKind.SEGMENTATION else d.reg_seed
        if raw_dir:
            items, manifest = load_raw_dataset(raw_dir)
        else:
            gen = gen_seg_dataset if kind is TaskKind.SEGMENTATION else gen_reg_dataset
            items = gen(d.n_subjects, size=d.size, channels=ch, seed=seed)
            manifest = make_manifest(items, seed)
        out[TASK_IDS[kind]] = TaskDataset(kind, {it.subject_id: it for it in items}, manifest, seed)
    return out


def write_datasets(datasets: dict[str, TaskDataset], out_dir) -> list[Path]:
    paths = []
    for task_id, ds in datasets.items():
        p = Path(out_dir) / task_id
        write_raw_dataset([ds.items[s] for s in ds.manifest.subjects], p, ds.manifest)
        paths.append(p)
    return paths


def pretrain(config: ExperimentConfig, datasets: dict[str, TaskDataset]) -> tuple[ParamStore, list[float]]:
    """Reconstruction-pretext pretraining on unlabeled patches pooled from every task's train split."""
    p = config.pretrain
    store = bb.build_unet(config.backbone, seed=p.seed)
    pool = []
    for task_id in sorted(datasets):
        ds = datasets[task_id]
        pool.extend(ds.items[s] for s in ds.manifest.train)
    per_task = max(1, p.n_volumes // max(1, len(datasets)))
    chosen = []
    for task_id in sorted(datasets):
        ds = datasets[task_id]
        chosen.extend(ds.items[s] for s in ds.manifest.train[:per_task])
    vols = [patch_extract(it, config.backbone.patch_size, derive_seed(p.seed, "pretrain", it.subject_id))[0]
            for it in chosen]
    history = bb.pretrain_backbone(store, vols, p.epochs, seed=p.seed, lr=p.lr)
    return store, history


def load_or_pretrain(config: ExperimentConfig, datasets: dict[str, TaskDataset], path=None) -> ParamStore:
    path = Path(path) if path is not None else config.out / "backbone.fgls"
    if path.exists():
        return load_checkpoint(path)
    store, history = pretrain(config, datasets)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(store, path, {"pretrain_history": json.dumps(history)})
    return store


# ---------------------------------------------------------------- grid

@dataclass
class CellResult:
    method: str
    seed: int
    n_shot: int
    order: str
    task_ids: list[str]
    kinds: list[str]
    R: list[list[float | None]] | None = None
    trainable_params: list[int] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    peak_rss_mb: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def metric(self, i: int, j: int) -> float | None:
        return None if self.R is None else self.R[i][j]

    def bwt(self, k: int = 0) -> float | None:
        if self.R is None or len(self.R) < 2:
            return None
        return bwt(self.R, k)


@dataclass
class GridResult:
    cells: list[CellResult]
    out_dir: Path | None = None

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]


def run_cell(config: ExperimentConfig, datasets, backbone: ParamStore, method, seed: int, n_shot: int,
             order=None, out_dir=None) -> CellResult:
    schedule = config.schedule(method, n_shot, order)
    label = schedule.method.label
    cell = CellResult(label, seed, n_shot, schedule.order_label, [t.task_id for t in schedule.tasks],
                      [t.kind.metric for t in schedule.tasks])
    try:
        res = run_schedule(schedule, datasets, backbone, seed, out_dir=out_dir)
    except Exception as exc:  # isolate the cell; the grid carries on
        cell.error = f"{type(exc).__name__}: {exc}"
        log.error("cell %s seed %d n_shot %d failed\n%s", label, seed, n_shot, traceback.format_exc())
        return cell
    cell.R = res.R.rows()
    cell.trainable_params = [lg.trainable_params for lg in res.logs]
    cell.wall_time = [lg.wall_time for lg in res.logs]
    cell.peak_rss_mb = [lg.peak_rss_mb for lg in res.logs]
    return cell


def run_grid(config: ExperimentConfig, datasets, backbone, methods=None, n_shots=None, seeds=None,
             order=None, out_dir=None) -> GridResult:
    cells = []
    for method in methods or config.methods:
        for n_shot in n_shots or config.n_shots:
            for seed in seeds or config.seeds:
                cells.append(run_cell(config, datasets, backbone, method, seed, n_shot, order, out_dir))
    return GridResult(cells, Path(out_dir) if out_dir else None)


# ---------------------------------------------------------------- tables

CSV_FIELDS = ["method", "order", "n_shot", "seed", "status", "t1", "t1_kind", "t2", "t2_kind",
              "t1_metric", "t2_metric", "t1_after_t2", "bwt", "bwt_convention", "trainable_params", "error"]


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def cell_rows(cells: list[CellResult]) -> list[dict]:
    """Flat, fully deterministic per-cell records (no timings)."""
    rows = []
    for c in cells:
        two = len(c.task_ids) > 1
        rows.append({
            "method": c.method,
            "order": c.order,
            "n_shot": c.n_shot,
            "seed": c.seed,
            "status": "ok" if c.ok else "failed",
            "t1": c.task_ids[0],
            "t1_kind": c.kinds[0],
            "t2": c.task_ids[1] if two else "",
            "t2_kind": c.kinds[1] if two else "",
            "t1_metric": _num(c.metric(0, 0)),
            "t2_metric": _num(c.metric(1, 1)) if two else "",
            "t1_after_t2": _num(c.metric(1, 0)) if two else "",
            "bwt": _num(c.bwt(0)),
            "bwt_convention": forgetting_convention(c.kinds[0]),
            "trainable_params": ";".join(str(n) for n in c.trainable_params),
            "error": c.error or "",
        })
    return rows


def results_csv(cells: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in cell_rows(cells):
        w.writerow(row)
    return buf.getvalue()


_ARROW = {"dice": "↑", "mae": "↓"}
_NAME = {"dice": "Dice", "mae": "MAE"}


def _summary_header(kinds: tuple[str, ...], extra: tuple[str, ...] = ()) -> list[str]:
    cols = ["Method", *extra]
    cols.append(f"T1 {_NAME[kinds[0]]}{_ARROW[kinds[0]]}")
    if len(kinds) > 1:
        cols.append(f"T2 {_NAME[kinds[1]]}{_ARROW[kinds[1]]}")
        cols += ["T1-after-T2", "BWT"]
    return cols


def summarize(cells: list[CellResult], group_by: tuple[str, ...] = ("method",)) -> list[dict]:
    """Mean ± std over seeds for each group of cells, in first-seen order.

    Each result row maps column name to rendered text; failed cells are
    excluded from the statistics and counted in ``failed``.
    """
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        groups.setdefault(tuple(getattr(c, g) for g in group_by), []).append(c)
    rows = []
    for key, members in groups.items():
        ok = [c for c in members if c.ok]
        kinds = tuple(members[0].kinds)
        row = {"Method": key[0]}
        for g, v in zip(group_by[1:], key[1:]):
            row[g] = str(v)
        cols = _summary_header(kinds)

        def agg(values, kind):
            return aggregate_seeds(values).render(kind) if values else "n/a"

        row[cols[1]] = agg([c.metric(0, 0) for c in ok], kinds[0])
        if len(kinds) > 1:
            row[cols[2]] = agg([c.metric(1, 1) for c in ok], kinds[1])
            row[cols[3]] = agg([c.metric(1, 0) for c in ok], kinds[0])
            row[cols[4]] = agg([c.bwt(0) for c in ok], kinds[0])
        row["seeds"] = " ".join(str(c.seed) for c in ok)
        row["failed"] = str(len(members) - len(ok))
        rows.append(row)
    return rows


def emit_table(rows: list[dict], fmt: str = "markdown", columns: list[str] | None = None) -> str:
    """Render summary rows as CSV or a Markdown pipe table.

    Column order is ``columns`` when given, otherwise the key order of the
    first row (``Method, T1 Dice↑, T2 MAE↓, T1-after-T2, BWT`` when empty).
    """
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown table format {fmt!r}")
    if columns is None:
        columns = list(rows[0]) if rows else _summary_header(("dice", "mae"))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r.get(c, "") for c in columns])
        return buf.getvalue()
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(r.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- resources

@dataclass(frozen=True)
class ResourceEntry:
    method: str
    seed: int
    n_shot: int
    task_id: str
    trainable_params: int
    wall_time_s: float
    peak_rss_mb: float


def resource_report(cells: list[CellResult]) -> list[ResourceEntry]:
    out = []
    for c in cells:
        for i, n in enumerate(c.trainable_params):
            out.append(ResourceEntry(c.method, c.seed, c.n_shot, c.task_ids[i], n, c.wall_time[i],
                                     c.peak_rss_mb[i]))
    return out


def fmt_count(n: int) -> str:
    return f"{int(n):,}"


def resource_table(entries: list[ResourceEntry], fmt: str = "markdown") -> str:
    """Trainable parameter counts (exact), wall time (measured) and peak RSS (process-wide, approximate)."""
    rows = [{"Method": e.method, "Task": e.task_id, "Seed": str(e.seed), "n_shot": str(e.n_shot),
             "Params (trainable)": fmt_count(e.trainable_params), "Wall time (s)": f"{e.wall_time_s:.1f}",
             "Peak RSS (MB, approx.)": f"{e.peak_rss_mb:.0f}"} for e in entries]
    cols = ["Method", "Task", "Seed", "n_shot", "Params (trainable)", "Wall time (s)", "Peak RSS (MB, approx.)"]
    return emit_table(rows, fmt, cols)


def adapter_param_counts(config: ExperimentConfig, backbone: ParamStore) -> dict[str, dict]:
    """``count_trainable`` for a fresh adapter + head of every task kind (what LoRA trains per task)."""
    from .lora import create_adapter
    out = {}
    for kind in config.task_order:
        kind = TaskKind(kind)
        lcfg = config.lora
        if kind is TaskKind.REGRESSION and lcfg.target_layer_pattern is None:
            lcfg = replace(lcfg, placement=Placement.ENCODER_ONLY)
        adapter = create_adapter(backbone, lcfg, seed=0, task_id=TASK_IDS[kind])
        head = bb.build_head(kind.head, config.backbone)
        out[TASK_IDS[kind]] = count_trainable(backbone, adapter, head)
    return out


# ---------------------------------------------------------------- experiments

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _log_line(out: Path, msg: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")


def _finish(config: ExperimentConfig, grid: GridResult, out: Path, name: str, summary: list[dict],
            columns: list[str] | None = None) -> None:
    _write(out / f"{name}.csv", results_csv(grid.cells))
    _write(out / f"{name}.md", emit_table(summary, "markdown", columns))
    _write(out / f"{name}_table.csv", emit_table(summary, "csv", columns))
    entries = resource_report(grid.cells)
    _write(out / f"{name}_resource.json",
           json.dumps([asdict(e) for e in entries], indent=2, sort_keys=True) + "\n")
    for c in grid.failed:
        _log_line(out, f"{name}: FAILED {c.method} seed={c.seed} n_shot={c.n_shot}: {c.error}")
    _log_line(out, f"{name}: {len(grid.cells) - len(grid.failed)}/{len(grid.cells)} cells ok")


def _prepare(config: ExperimentConfig):
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.toml", dump_config(config))
    datasets = generate_datasets(config)
    backbone = load_or_pretrain(config, datasets)
    return out, datasets, backbone


def run(config: ExperimentConfig, datasets=None, backbone=None) -> GridResult:
    """The main grid: every method × n_shot × seed in the configured order.

    Writes ``results.csv`` (per cell), ``results.md`` / ``results_table.csv``
    (mean ± std per method and n_shot) and ``results_resource.json``.
    """
    out, ds, bbone = _prepare(config)
    datasets = datasets or ds
    backbone = backbone or bbone
    grid = run_grid(config, datasets, backbone, out_dir=out / "runs")
    group = ("method", "n_shot") if len(config.n_shots) > 1 else ("method",)
    summary = summarize(grid.cells, group)
    _finish(config, grid, out, "results", summary)
    return grid


def ablation_lora_placement(config: ExperimentConfig, datasets=None, backbone=None) -> tuple[GridResult, str]:
    """EncoderOnly vs EncoderAndDecoder LoRA on identical seeds, data and T2 pipeline."""
    out, ds, bbone = _prepare(config)
    datasets, backbone = datasets or ds, backbone or bbone
    base = config.method_config("lora")
    methods = [base.with_placement(p) for p in (Placement.ENCODER_ONLY, Placement.ENCODER_AND_DECODER)]
    cells = []
    for mc in methods:
        cells += run_grid(config, datasets, backbone, methods=[mc], n_shots=config.n_shots[:1],
                          out_dir=out / "runs").cells
    grid = GridResult(cells, out)
    summary = summarize(cells)
    _finish(config, grid, out, "ablate_placement", summary)
    return grid, emit_table(summary, "markdown")


def ablation_shots(config: ExperimentConfig, datasets=None, backbone=None,
                   shots: tuple[int, ...] = (16, 32, 64)) -> tuple[GridResult, str]:
    """LoRA at each shot count; few-shot subsets are nested by construction."""
    out, ds, bbone = _prepare(config)
    datasets, backbone = datasets or ds, backbone or bbone
    grid = run_grid(config, datasets, backbone, methods=["lora"], n_shots=shots, out_dir=out / "runs")
    summary = summarize(grid.cells, ("method", "n_shot"))
    _finish(config, grid, out, "ablate_shots", summary)
    return grid, emit_table(summary, "markdown")


def order_flip(config: ExperimentConfig, datasets=None, backbone=None,
               methods: tuple[str, ...] = ("lora", "seq_ft")) -> tuple[GridResult, str]:
    """The configured order and its reverse, with the BWT sign convention of each first task."""
    out, ds, bbone = _prepare(config)
    datasets, backbone = datasets or ds, backbone or bbone
    orders = [tuple(config.task_order), tuple(reversed(config.task_order))]
    cells = []
    for order in orders:
        cells += run_grid(config, datasets, backbone, methods=list(methods), n_shots=config.n_shots[:1],
                          order=order, out_dir=out / "runs").cells
    grid = GridResult(cells, out)
    rows = []
    for c in cells:
        rows.append({
            "Method": c.method,
            "Order": c.order,
            "Seed": str(c.seed),
            "T1 at training": "n/a" if not c.ok else fmt_metric(c.metric(0, 0), c.kinds[0]),
            "T1 after T2": "n/a" if not c.ok else fmt_metric(c.metric(1, 0), c.kinds[0]),
            "BWT": "n/a" if not c.ok else fmt_metric(c.bwt(0), c.kinds[0]),
            "Convention": forgetting_convention(c.kinds[0]),
        })
    _finish(config, grid, out, "order_flip", rows)
    return grid, emit_table(rows, "markdown")


def report(out_dir) -> str:
    """Re-render the summary tables from every ``*.csv`` grid file in ``out_dir``."""
    out = Path(out_dir)
    texts = []
    for name in ("results", "ablate_placement", "ablate_shots", "order_flip"):
        p = out / f"{name}.md"
        if p.exists():
            texts.append(f"## {name}\n\n" + p.read_text(encoding="utf-8"))
        r = out / f"{name}_resource.json"
        if r.exists():
            entries = [ResourceEntry(**e) for e in json.loads(r.read_text(encoding="utf-8"))]
            texts.append(f"### {name} resources\n\n" + resource_table(entries))
    return "\n".join(texts)


def read_results_csv(text: str) -> list[CellResult]:
    """Parse ``results.csv`` back into cells (timings are not stored there)."""
    cells = []
    for row in csv.DictReader(io.StringIO(text)):
        two = bool(row["t2"])
        f = lambda s: float(s) if s else None  # noqa: E731
        R = None
        if row["status"] == "ok":
            R = [[f(row["t1_metric"])] + ([None] if two else [])]
            if two:
                R.append([f(row["t1_after_t2"]), f(row["t2_metric"])])
        cells.append(CellResult(row["method"], int(row["seed"]), int(row["n_shot"]), row["order"],
                                [row["t1"]] + ([row["t2"]] if two else []),
                                [row["t1_kind"]] + ([row["t2_kind"]] if two else []), R,
                                [int(x) for x in row["trainable_params"].split(";") if x],
                                error=row["error"] or None))
    return cells


def metric_kind(kind: str) -> MetricKind:
    return MetricKind(kind)


__all__ = [
    "ConfigError", "DataConfig", "PretrainConfig", "ExperimentConfig", "config_from_dict", "load_config",
    "dump_config", "paper_scale", "generate_datasets", "write_datasets", "pretrain", "load_or_pretrain",
    "CellResult", "GridResult", "run_cell", "run_grid", "cell_rows", "results_csv", "summarize",
    "emit_table", "ResourceEntry", "resource_report", "resource_table", "fmt_count", "adapter_param_counts",
    "run", "ablation_lora_placement", "ablation_shots", "order_flip", "report", "read_results_csv",
    "schedule_name",
]
