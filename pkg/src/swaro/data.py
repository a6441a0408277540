"""Datasets, view augmentations and positive-pair batches."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset file; the message cites the offending line."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional labels and per-feature domain bounds."""

    features: np.ndarray
    labels: np.ndarray | None
    lower: np.ndarray
    upper: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None
    centers: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be a 2-D array, got shape {f.shape}")
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (len(f),):
                raise ValueError("one label per sample required")
            k = self.num_classes if self.num_classes is not None else int(lab.max(initial=-1)) + 1
            if len(lab) and (lab.min() < 0 or lab.max() >= k):
                raise ValueError(f"labels must lie in [0, {k})")
            object.__setattr__(self, "labels", lab)
            object.__setattr__(self, "num_classes", k)
        object.__setattr__(self, "lower", np.broadcast_to(
            np.asarray(self.lower, dtype=np.float64), (f.shape[1],)).copy())
        object.__setattr__(self, "upper", np.broadcast_to(
            np.asarray(self.upper, dtype=np.float64), (f.shape[1],)).copy())

    def __len__(self):
        return len(self.features)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx],
                       labels=None if self.labels is None else self.labels[idx])


def gen_blobs(n: int, classes: int, dim: int, spread: float, seed: int = 0,
              box: float | None = None, normalize: bool = True) -> Dataset:
    """Class-balanced isotropic Gaussian blobs.

    Centers are drawn uniformly in ``[0, box]^dim`` with rejection so that
    every pair is at least ``6 * spread`` apart.  With ``normalize`` the whole
    dataset (and the centers) go through one global affine map onto ``[0, 1]``,
    which keeps the geometry isotropic.
    """
    if classes < 1 or n < classes:
        raise ValueError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if dim < 1:
        raise ValueError("dim must be positive")
    min_gap = 6.0 * spread
    if box is None:
        box = 2.0 * min_gap * max(1.0, classes ** (1.0 / dim))
    rng = np.random.default_rng(seed)
    centers = []
    for _ in range(classes):
        for _attempt in range(2000):
            c = rng.uniform(0.0, box, size=dim)
            if all(np.linalg.norm(c - o) >= min_gap for o in centers):
                centers.append(c)
                break
        else:
            raise ValueError(
                f"cannot place {classes} centers {min_gap:g} apart inside [0, {box:g}]^{dim}")
    centers = np.asarray(centers)
    labels = np.arange(n) % classes
    x = centers[labels] + spread * rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    x, labels = x[perm], labels[perm]
    if normalize:
        lo, hi = x.min(), x.max()
        span = hi - lo if hi > lo else 1.0
        x = (x - lo) / span
        centers = (centers - lo) / span
        lower, upper = np.zeros(dim), np.ones(dim)
    else:
        lower, upper = x.min(axis=0), x.max(axis=0)
    return Dataset(x, labels, lower, upper, name="blobs", num_classes=classes, centers=centers)


@dataclass(frozen=True)
class CsvSchema:
    width: int
    lower: float = 0.0
    upper: float = 255.0
    num_classes: int | None = None


def load_csv_dataset(path: str | os.PathLike, schema: CsvSchema | dict) -> Dataset:
    """Read ``label, f1, ..., fw`` rows and rescale features to ``[0, 1]``."""
    if isinstance(schema, dict):
        schema = CsvSchema(**schema)
    if schema.upper <= schema.lower:
        raise ValueError("schema upper bound must exceed lower bound")
    feats, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != schema.width + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {schema.width + 1} cells, got {len(row)}")
            try:
                lab = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if lab < 0 or (schema.num_classes is not None and lab >= schema.num_classes):
                raise DataFormatError(f"{path}:{lineno}: unknown label {lab}")
            if not all(np.isfinite(vals)):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            labels.append(lab)
            feats.append(vals)
    x = np.asarray(feats, dtype=np.float64).reshape(-1, schema.width)
    x = np.clip((x - schema.lower) / (schema.upper - schema.lower), 0.0, 1.0)
    k = schema.num_classes
    if k is None:
        k = max(labels) + 1 if labels else 0
    return Dataset(x, np.asarray(labels, dtype=np.int64), np.zeros(schema.width),
                   np.ones(schema.width), name=os.path.basename(os.fspath(path)), num_classes=k)


def train_test_split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    """Stochastic view transformation for vector (optionally grid) data.

    Order of application: shift, scaling, masking, noise, then a clamp back
    into the domain.  The default instance is the identity.
    """

    noise_std: float = 0.0
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    mask_prob: float = 0.0
    shift: int = 0
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError("scaling range needs 0 < lo <= hi")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.shift < 0:
            raise ValueError("shift must be >= 0")


def _view_seed(seed: int, index: int, view: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(view)]))


def augment(x: np.ndarray, spec: AugmentationSpec, seed, lower=0.0, upper=1.0) -> np.ndarray:
    """One random view of ``x``; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = np.array(x, dtype=np.float64)
    if spec.shift and spec.grid_shape is not None:
        dy, dx = rng.integers(-spec.shift, spec.shift + 1, size=2)
        v = np.roll(v.reshape(spec.grid_shape), (dy, dx), axis=(0, 1)).reshape(-1)
    if spec.scale_hi != 1.0 or spec.scale_lo != 1.0:
        v = v * rng.uniform(spec.scale_lo, spec.scale_hi)
    if spec.mask_prob > 0:
        drop = rng.random(v.shape) < spec.mask_prob
        v = np.where(drop, np.broadcast_to(lower, v.shape), v)
    if spec.noise_std > 0:
        v = v + spec.noise_std * rng.standard_normal(v.shape)
    return np.clip(v, lower, upper)


@dataclass
class PairBatch:
    """B positive pairs plus the bookkeeping for permuted attacks.

    ``sigma[i]`` is the (0-based) index of the second view currently paired
    with ``view1[i]``.  ``view2`` itself is never reordered, so undoing a
    permutation only resets ``sigma``.
    """

    view1: np.ndarray
    view2: np.ndarray
    source: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    pseudo1: np.ndarray | None = None
    pseudo2: np.ndarray | None = None
    beta: np.ndarray | None = None
    view2_source: np.ndarray | None = field(default=None)
    permuted: bool = False

    def __post_init__(self):
        if self.view2_source is None:
            self.view2_source = self.source.copy()

    def __len__(self):
        return len(self.source)

    def partner_view2(self) -> np.ndarray:
        """Second views as currently paired with each first view."""
        return self.view2[self.sigma]

    def partner_source(self) -> np.ndarray:
        return self.view2_source[self.sigma]

    def adversarial_view1(self) -> np.ndarray:
        return self.view1 + self.delta


def make_pair_batch(ds: Dataset, indices, spec: AugmentationSpec, seed: int) -> PairBatch:
    """Two independent augmentations of each selected sample."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("duplicate indices in pair batch")
    if len(idx) and (idx.min() < 0 or idx.max() >= len(ds)):
        raise IndexError("pair batch index outside the dataset")
    v1 = np.empty((len(idx), ds.width))
    v2 = np.empty_like(v1)
    for row, i in enumerate(idx):
        x = ds.features[i]
        v1[row] = augment(x, spec, _view_seed(seed, i, 1), ds.lower, ds.upper)
        v2[row] = augment(x, spec, _view_seed(seed, i, 2), ds.lower, ds.upper)
    return PairBatch(v1, v2, idx.copy(), np.arange(len(idx)), np.zeros_like(v1))
