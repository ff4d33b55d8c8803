"""Seeded synthetic stand-in tasks and preprocessing.

Segmentation volumes: spatially smooth Gaussian noise (unit variance per voxel,
correlated across channels) with one to three ellipsoidal lesions raised by a
per-channel offset; the mask is the union of the ellipsoids.  Smooth noise makes
single voxels ambiguous, so a model has to use context from its deeper layers
rather than solving the task through the full-resolution skip alone.  Regression volumes: a bright sphere with a dark central cavity whose
*volume* grows linearly with the target ``t in [0, 1]``, so the mean intensity of
the central region is affine in ``t``.  Both generators check a trivial oracle
(thresholding, affine readout) before returning, so a learner that fails on
them cannot blame the data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .rng import SplitMix64, derive_seed

SEG_OFFSETS = (2.5, 2.0, 1.5)
CHANNEL_CORRELATION = 0.5
SEG_NOISE_SIGMA = 2.0
THRESHOLD_ORACLE_MIN_DICE = 0.5
AFFINE_ORACLE_MAX_MAE = 0.1


class DataError(ValueError):
    pass


@dataclass
class LabeledVolume:
    volume: np.ndarray
    subject_id: str
    mask: np.ndarray | None = None
    target: float | None = None
    imputed: bool = False

    def __post_init__(self):
        if (self.mask is None) == (self.target is None):
            raise DataError(f"{self.subject_id}: exactly one of mask / target must be set")
        if self.mask is not None and not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"{self.subject_id}: mask is not binary")
        if self.target is not None and not np.isfinite(self.target):
            raise DataError(f"{self.subject_id}: target is not finite")

    @property
    def kind(self) -> str:
        return "segmentation" if self.mask is not None else "regression"


@dataclass
class DatasetManifest:
    subjects: list[str]
    seed: int
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)


def _smooth_field(rng: SplitMix64, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Unit-variance Gaussian field; ``sigma > 0`` blurs each 3-D volume with periodic edges."""
    z = rng.normal(shape)
    if sigma <= 0:
        return z
    axes_sigma = (0.0,) * (len(shape) - 3) + (sigma,) * 3
    z = gaussian_filter(z, axes_sigma, mode="wrap")
    return z / z.std(axis=(-3, -2, -1), keepdims=True)


def _background(rng: SplitMix64, channels: int, size: int, sigma: float = 0.0) -> np.ndarray:
    shared = _smooth_field(rng, (size, size, size), sigma)
    own = _smooth_field(rng, (channels, size, size, size), sigma)
    rho = CHANNEL_CORRELATION
    return rho * shared[None] + np.sqrt(1.0 - rho * rho) * own


def _grid(size: int):
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def dataset_hash(items: list[LabeledVolume]) -> str:
    import hashlib
    h = hashlib.blake2b(digest_size=8)
    for it in items:
        h.update(it.subject_id.encode())
        h.update(np.ascontiguousarray(it.volume, "<f8").tobytes())
        if it.mask is not None:
            h.update(np.ascontiguousarray(it.mask, "<f8").tobytes())
        else:
            h.update(np.float64(it.target).tobytes())
    return h.hexdigest()


def gen_seg_dataset(n: int, size: int = 24, channels: int = 2, seed: int = 0,
                    verify: bool = True) -> list[LabeledVolume]:
    if size < 8:
        raise DataError("size must be at least 8")
    zz, yy, xx = _grid(size)
    offsets = np.array([SEG_OFFSETS[c % len(SEG_OFFSETS)] for c in range(channels)])
    out = []
    for i in range(n):
        rng = SplitMix64(derive_seed(seed, "seg", i))
        vol = _background(rng, channels, size, SEG_NOISE_SIGMA)
        mask = np.zeros((size, size, size))
        n_lesions = 1 + rng.integers(3)
        for _ in range(n_lesions):
            centre = rng.uniform(3) * (0.5 * size) + 0.25 * size
            axes = 2.0 + rng.uniform(3) * (size / 8.0)
            d = ((zz - centre[0]) / axes[0]) ** 2 + ((yy - centre[1]) / axes[1]) ** 2 + ((xx - centre[2]) / axes[2]) ** 2
            mask[d <= 1.0] = 1.0
        if mask.sum() == 0:
            c = size // 2
            mask[c - 1:c + 1, c - 1:c + 1, c - 1:c + 1] = 1.0
        vol = vol + offsets[:, None, None, None] * mask[None]
        out.append(LabeledVolume(zscore_normalize(vol), f"seg{i:04d}", mask=mask[None]))
    if verify and n:
        score = threshold_oracle_dice(out)
        if score <= THRESHOLD_ORACLE_MIN_DICE:
            raise DataError(f"threshold oracle Dice {score:.3f} <= {THRESHOLD_ORACLE_MIN_DICE}")
    return out


def threshold_oracle_dice(items: list[LabeledVolume]) -> float:
    """Mean Dice of ``channel-mean > tau``, with ``tau`` picked on the data."""
    from .metrics import dice
    vols = np.stack([it.volume.mean(axis=0) for it in items])
    masks = np.stack([it.mask[0] for it in items])
    best = 0.0
    for tau in np.linspace(0.0, 2.0, 21):
        pred = (vols > tau).astype(np.float64)
        best = max(best, float(np.mean([dice(p, m) for p, m in zip(pred, masks)])))
    return best


_CAVITY_MIN, _CAVITY_MAX = 1.5, 5.0


def _cavity_radius(t: float, size: int) -> float:
    scale = size / 24.0
    lo, hi = _CAVITY_MIN * scale, _CAVITY_MAX * scale
    return float((lo ** 3 + t * (hi ** 3 - lo ** 3)) ** (1.0 / 3.0))


def gen_reg_dataset(n: int, size: int = 24, channels: int = 2, seed: int = 0,
                    verify: bool = True, label_noise: float = 0.01) -> list[LabeledVolume]:
    if size < 8:
        raise DataError("size must be at least 8")
    zz, yy, xx = _grid(size)
    c = (size - 1) / 2.0
    r2 = (zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2
    brain = (r2 <= (0.42 * size) ** 2).astype(np.float64)
    contrast = np.array([(-1.0) ** ch * (1.0 + 0.25 * ch) for ch in range(channels)])
    out = []
    for i in range(n):
        rng = SplitMix64(derive_seed(seed, "reg", i))
        t = rng.uniform()
        cavity = (r2 <= _cavity_radius(t, size) ** 2).astype(np.float64)
        vol = 0.5 * _background(rng, channels, size)
        vol = vol + brain[None] - contrast[:, None, None, None] * cavity[None]
        target = float(np.clip(t + label_noise * rng.normal(), 0.0, 1.0))
        out.append(LabeledVolume(zscore_normalize(vol), f"reg{i:04d}", target=target))
    if verify and n >= 4:
        err = affine_oracle_mae(out)
        if err >= AFFINE_ORACLE_MAX_MAE:
            raise DataError(f"affine oracle MAE {err:.3f} >= {AFFINE_ORACLE_MAX_MAE}")
    return out


def central_mean(volume: np.ndarray) -> float:
    s = volume.shape[-1]
    lo, hi = s // 4, s - s // 4
    return float(volume[0, lo:hi, lo:hi, lo:hi].mean())


def affine_oracle_mae(items: list[LabeledVolume]) -> float:
    """In-sample MAE of a least-squares affine fit ``target ~ a * central_mean + b``."""
    x = np.array([central_mean(it.volume) for it in items])
    y = np.array([it.target for it in items])
    design = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.mean(np.abs(design @ coef - y)))


def zscore_normalize(volume: np.ndarray) -> np.ndarray:
    """Per-channel ``(x - mean) / max(std, 1e-8)``."""
    v = np.asarray(volume, dtype=np.float64)
    axes = tuple(range(1, v.ndim))
    mean = v.mean(axis=axes, keepdims=True)
    std = v.std(axis=axes, keepdims=True)
    return (v - mean) / np.maximum(std, 1e-8)


def make_manifest(items: list[LabeledVolume], seed: int, val_fraction: float = 0.2) -> DatasetManifest:
    ids = sorted(it.subject_id for it in items)
    perm = SplitMix64(derive_seed(seed, "split")).permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    shuffled = [ids[i] for i in perm]
    return DatasetManifest(ids, seed, train=sorted(shuffled[n_val:]), val=sorted(shuffled[:n_val]))


def few_shot_sample(manifest: DatasetManifest, n_shot: int, seed: int) -> list[str]:
    """Sorted train ids, seeded shuffle, first ``n_shot``; nested in ``n_shot`` for a fixed seed."""
    train = sorted(manifest.train)
    if n_shot > len(train):
        raise DataError(f"n_shot {n_shot} exceeds train split size {len(train)}")
    if n_shot < 1:
        raise DataError("n_shot must be positive")
    perm = SplitMix64(derive_seed(seed, "few-shot")).permutation(len(train))
    return [train[i] for i in perm[:n_shot]]


def patch_extract(item: LabeledVolume, patch_size: int, seed: int | SplitMix64,
                  foreground_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray | float]:
    """Crop a ``patch_size**3`` patch and its label.

    Segmentation: with probability ``foreground_prob`` the crop is centred on a
    uniformly chosen mask voxel (clamped to the volume), otherwise uniform.
    Regression: centre crop.
    """
    rng = seed if isinstance(seed, SplitMix64) else SplitMix64(seed)
    spatial = item.volume.shape[1:]
    if any(patch_size > s for s in spatial):
        raise DataError(f"patch {patch_size} larger than volume {spatial}")
    if item.mask is None:
        start = [(s - patch_size) // 2 for s in spatial]
    else:
        fg = np.argwhere(item.mask[0] > 0)
        if len(fg) and rng.uniform() < foreground_prob:
            centre = fg[rng.integers(len(fg))]
            start = [int(np.clip(c - patch_size // 2, 0, s - patch_size)) for c, s in zip(centre, spatial)]
        else:
            start = [rng.integers(s - patch_size + 1) for s in spatial]
    sl = (slice(None),) + tuple(slice(a, a + patch_size) for a in start)
    vol = item.volume[sl]
    if item.mask is None:
        return vol, item.target
    return vol, item.mask[sl]


# ---------------------------------------------------------------- raw loader

def write_raw_dataset(items: list[LabeledVolume], directory, manifest: DatasetManifest) -> None:
    """Write volumes/masks in the checkpoint tensor encoding plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    subjects = []
    for it in items:
        entry = {"id": it.subject_id, "volume_file": f"{it.subject_id}.vol.fgls"}
        write_checkpoint(Checkpoint({"volume": it.volume}), d / entry["volume_file"])
        if it.mask is not None:
            entry["mask_file"] = f"{it.subject_id}.mask.fgls"
            write_checkpoint(Checkpoint({"mask": it.mask}), d / entry["mask_file"])
        else:
            entry["label"] = it.target
        if it.imputed:
            entry["imputed"] = True
        subjects.append(entry)
    doc = {"seed": manifest.seed, "subjects": subjects, "split": {"train": manifest.train, "val": manifest.val}}
    (d / "manifest.json").write_text(json.dumps(doc, indent=2))


def load_raw_dataset(directory) -> tuple[list[LabeledVolume], DatasetManifest]:
    d = Path(directory)
    try:
        doc = json.loads((d / "manifest.json").read_text())
        seed = int(doc["seed"])
        entries = doc["subjects"]
        split = doc["split"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed manifest in {d}: {e}") from None
    items = []
    for entry in entries:
        sid = entry.get("id")
        if not sid or "volume_file" not in entry:
            raise DataError(f"manifest entry missing id/volume_file: {entry}")
        try:
            vol = read_checkpoint(d / entry["volume_file"]).tensors["volume"]
        except (OSError, CheckpointError, KeyError) as e:
            raise DataError(f"{sid}: cannot read volume: {e}") from None
        if vol.ndim != 4:
            raise DataError(f"{sid}: volume must be [C,D,H,W], got {vol.shape}")
        imputed = bool(entry.get("imputed", False))
        if "mask_file" in entry:
            mask = read_checkpoint(d / entry["mask_file"]).tensors["mask"]
            if mask.shape != (1,) + vol.shape[1:]:
                raise DataError(f"{sid}: mask shape {mask.shape} does not match volume {vol.shape}")
            items.append(LabeledVolume(vol, sid, mask=mask, imputed=imputed))
        else:
            label = entry.get("label", entry.get("age"))
            if label is None:
                raise DataError(f"{sid}: missing label")
            items.append(LabeledVolume(vol, sid, target=float(label), imputed=imputed))
    known = {it.subject_id for it in items}
    train, val = list(split.get("train", [])), list(split.get("val", []))
    if set(train) & set(val) or not set(train) | set(val) <= known:
        raise DataError("split lists must be disjoint subsets of the subjects")
    return items, DatasetManifest(sorted(known), seed, sorted(train), sorted(val))
