"""Dataset loading, preprocessing, splitting and synthetic warped data."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, DomainError, Rng, Series

log = logging.getLogger(__name__)

ARABIC_DIM = 13


class DataFormatError(ValueError):
    pass


# -- loaders ----------------------------------------------------------------------

def _parse_blocks(path: Path, dim: int):
    blocks, current = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                if current:
                    blocks.append(current)
                    current = []
                continue
            if len(fields) != dim:
                raise DataFormatError(f"{path}:{lineno}: expected {dim} numbers, got {len(fields)}")
            try:
                row = [float(f) for f in fields]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(row)):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            current.append(row)
    if current:
        blocks.append(current)
    return blocks


def load_blocks(path, manifest: Sequence[int], dim: int = ARABIC_DIM) -> Dataset:
    """Blank-line separated blocks of ``dim`` numbers per line; the first
    ``manifest[0]`` blocks are class 0, the next ``manifest[1]`` class 1, ..."""
    path = Path(path)
    blocks = _parse_blocks(path, dim)
    if sum(manifest) != len(blocks):
        raise DataFormatError(
            f"{path}: manifest lists {sum(manifest)} blocks ({list(manifest)}), file has {len(blocks)}")
    labels = np.repeat(np.arange(len(manifest)), manifest)
    items = [Series(np.array(b), int(lab), f"{path.name}#{i}") for i, (b, lab) in enumerate(zip(blocks, labels))]
    return Dataset(items, len(manifest), dim)


def load_arabic(train_path, test_path, train_manifest: Sequence[int], test_manifest: Sequence[int]):
    """UCI Spoken Arabic Digit files (13 MFCCs per frame) with their fixed
    speaker-independent train/test division."""
    if len(train_manifest) != len(test_manifest):
        raise DataFormatError("train and test manifests list different numbers of classes")
    return (load_blocks(train_path, train_manifest, ARABIC_DIM),
            load_blocks(test_path, test_manifest, ARABIC_DIM))


def _read_rows(path: Path) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable ({exc})") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.replace(",", " ").split()
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DataFormatError(f"{path}:{lineno}: {len(rows[-1])} columns, expected {len(rows[0])}")
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: non-finite value")
    return arr


def load_delimited_dir(root) -> Dataset:
    """``root/<class>/<sample>.csv``; labels follow the sorted class names."""
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataFormatError(f"{root}: no class directories")
    items, dim = [], None
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix in (".csv", ".txt"))
        if not files:
            raise DataFormatError(f"{root / name}: empty class directory")
        for f in files:
            values = _read_rows(f)
            if dim is None:
                dim = values.shape[1]
            elif values.shape[1] != dim:
                raise DataFormatError(f"{f}: {values.shape[1]} feature columns, expected {dim}")
            items.append(Series(values, label, str(f)))
    return Dataset(items, len(classes), dim)


def write_delimited_dir(dataset: Dataset, root) -> list:
    """Inverse of ``load_delimited_dir``; values are written at full precision."""
    root = Path(root)
    width = max(3, len(str(dataset.num_classes - 1)))
    counters = np.zeros(dataset.num_classes, dtype=int)
    written = []
    for s in dataset:
        d = root / f"class_{s.label:0{width}d}"
        d.mkdir(parents=True, exist_ok=True)
        f = d / f"sample_{counters[s.label]:05d}.csv"
        counters[s.label] += 1
        np.savetxt(f, s.values, delimiter=",", fmt="%.17g")
        written.append(f)
    return written


# -- preprocessing --------------------------------------------------------------

def resample(series: Series, length: int) -> Series:
    """Linear interpolation along time to exactly ``length`` steps."""
    if length < 2:
        raise ValueError(f"resample length must be >= 2, got {length}")
    v = series.values
    T = v.shape[0]
    if T == length:
        return series
    if T == 1:
        out = np.repeat(v, length, axis=0)
    else:
        pos = np.linspace(0.0, T - 1.0, length)
        grid = np.arange(T, dtype=float)
        out = np.column_stack([np.interp(pos, grid, v[:, k]) for k in range(v.shape[1])])
    return Series(out, series.label, series.id)


def resample_dataset(dataset: Dataset, length: int) -> Dataset:
    return Dataset([resample(s, length) for s in dataset], dataset.num_classes,
                   dataset.feature_dim, length)


def zscore_stats(dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    stacked = np.concatenate([s.values for s in dataset])
    return stacked.mean(axis=0), stacked.std(axis=0)


def apply_zscore(dataset: Dataset, mean, std) -> Dataset:
    """Dimensions with zero spread pass through untouched."""
    mean = np.asarray(mean)
    std = np.asarray(std)
    keep = std == 0
    safe_std = np.where(keep, 1.0, std)
    safe_mean = np.where(keep, 0.0, mean)
    items = [Series((s.values - safe_mean) / safe_std, s.label, s.id) for s in dataset]
    return Dataset(items, dataset.num_classes, dataset.feature_dim, dataset.fixed_length)


def zscore(dataset: Dataset):
    """Per-dimension standardization; returns ``(normalized, mean, std)``."""
    mean, std = zscore_stats(dataset)
    return apply_zscore(dataset, mean, std), mean, std


# -- splitting ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.10
    validation_count: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.validation_count < 0:
            raise ValueError(f"validation_count must be >= 0, got {self.validation_count}")


def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    # largest-remainder apportionment of `total` across classes, ties to lower class index
    quota = counts * (total / counts.sum())
    alloc = np.floor(quota).astype(int)
    rem = quota - alloc
    order = sorted(range(len(counts)), key=lambda k: (-rem[k], k))
    for k in order[: total - alloc.sum()]:
        alloc[k] += 1
    return np.minimum(alloc, counts)


def split_indices(labels: np.ndarray, num_classes: int, spec: SplitSpec):
    """Stratified (train, validation, test) index arrays, each sorted."""
    labels = np.asarray(labels)
    n = len(labels)
    n_test = int(round(spec.test_fraction * n))
    if n_test < 1 or n - n_test - spec.validation_count < 1:
        raise ValueError(f"dataset of {n} items too small for {spec}")
    gen = Rng(spec.seed).stream("split")
    counts = np.bincount(labels, minlength=num_classes)
    per_class = [gen.permutation(np.flatnonzero(labels == k)) for k in range(num_classes)]
    test_alloc = _allocate(counts, n_test)
    rest = [p[a:] for p, a in zip(per_class, test_alloc)]
    val_alloc = _allocate(np.array([len(r) for r in rest]), spec.validation_count) \
        if spec.validation_count else np.zeros(num_classes, dtype=int)
    test = np.concatenate([p[:a] for p, a in zip(per_class, test_alloc)])
    val = np.concatenate([r[:a] for r, a in zip(rest, val_alloc)])
    train = np.concatenate([r[a:] for r, a in zip(rest, val_alloc)])
    return np.sort(train), np.sort(val), np.sort(test)


def split(dataset: Dataset, spec: SplitSpec):
    tr, va, te = split_indices(dataset.labels, dataset.num_classes, spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


# -- synthetic data --------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    classes: int = 4
    per_class: int = 250
    length: int = 50
    dim: int = 2
    warp: float = 2.0  # max local time-scale factor
    noise: float = 0.05
    seed: int = 0
    bumps: int = 4  # Gaussian bumps per prototype dimension
    shared: int = 0  # of those, how many are common to every class

    def __post_init__(self):
        if min(self.classes, self.per_class, self.length, self.dim, self.bumps) < 1 or self.length < 2:
            raise ValueError(f"invalid synthetic spec {self}")
        if not 0 <= self.shared < self.bumps:
            raise ValueError(f"shared bumps must lie in [0, bumps), got {self.shared}")
        if self.warp < 1 or self.noise < 0:
            raise ValueError(f"need warp >= 1 and noise >= 0, got {self.warp}, {self.noise}")


def _bumps(gen, spec, count):
    return (gen.uniform(0.1, 0.9, size=(spec.dim, count)),
            gen.uniform(0.02, 0.05, size=(spec.dim, count)),  # widths, as a fraction of the length
            gen.normal(0.0, 1.0, size=(spec.dim, count)))


def _prototype(gen, spec, common):
    own = _bumps(gen, spec, spec.bumps - spec.shared)
    centers, widths, amps = (np.concatenate([c, o], axis=1) for c, o in zip(common, own))

    def f(u):  # u in [0, 1], shape (T,) -> (T, dim)
        z = (u[None, :, None] - centers[:, None, :]) / widths[:, None, :]
        return (amps[:, None, :] * np.exp(-0.5 * z * z)).sum(axis=-1).T
    return f


def random_warp(gen, length: int, warp: float, segments: int = 4) -> np.ndarray:
    """Monotone map of [0, L-1] onto itself whose local slope stays in [1/warp, warp]."""
    t = np.arange(length, dtype=float)
    if warp == 1:
        return t
    lo, hi = 1.0 / warp, float(warp)
    slopes = np.exp(gen.uniform(-np.log(warp), np.log(warp), size=segments))
    # rescale to mean 1 so both ends stay fixed, clipping back into the slope
    # band; a few rounds converge because 1 lies strictly inside the band
    for _ in range(50):
        slopes = np.clip(slopes / slopes.mean(), lo, hi)
        if abs(slopes.mean() - 1.0) < 1e-12:
            break
    knots = np.linspace(0.0, length - 1.0, segments + 1)
    values = np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])
    out = np.interp(t, knots, values)
    out[-1] = length - 1.0
    return out


def synth_warped(spec: SynthSpec) -> Dataset:
    """Class prototypes (sums of Gaussian bumps) under random monotone time
    warps plus white noise. Samples are ordered class by class."""
    gen = Rng(spec.seed).stream("synth")
    common = _bumps(gen, spec, spec.shared)
    protos = [_prototype(gen, spec, common) for _ in range(spec.classes)]
    L = spec.length
    items = []
    for k, f in enumerate(protos):
        for i in range(spec.per_class):
            tau = random_warp(gen, L, spec.warp)
            values = f(tau / (L - 1))
            if spec.noise > 0:
                values = values + gen.normal(0.0, spec.noise, size=values.shape)
            items.append(Series(values, k, f"synth/{k}/{i}"))
    return Dataset(items, spec.classes, spec.dim, L)


def prototypes(spec: SynthSpec) -> np.ndarray:
    """The undistorted class prototypes of ``synth_warped(spec)``, (K, L, D)."""
    gen = Rng(spec.seed).stream("synth")
    common = _bumps(gen, spec, spec.shared)
    u = np.arange(spec.length, dtype=float) / (spec.length - 1)
    return np.stack([_prototype(gen, spec, common)(u) for _ in range(spec.classes)])


def prepare(train: Dataset, others: Sequence[Optional[Dataset]], length: int):
    """Resample everything to ``length`` and standardize with training statistics."""
    train = resample_dataset(train, length)
    train, mean, std = zscore(train)
    out = [None if d is None else apply_zscore(resample_dataset(d, length), mean, std) for d in others]
    return train, out, (mean, std)
