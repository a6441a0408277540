"""Lloyd k-means with k-means++ seeding, and nearest-centroid pseudo-labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    history: tuple[float, ...] = field(default=())
    repairs: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class PseudoLabels:
    labels: np.ndarray
    epoch: int | None = None


def squared_distances(z: np.ndarray, c: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact ``sum((z_i - c_j)**2)`` for every pair, computed chunk-wise."""
    out = np.empty((len(z), len(c)))
    for s in range(0, len(z), chunk):
        diff = z[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _kmeanspp(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(z)
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(z, z[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, squared_distances(z, z[[nxt]])[:, 0])
    return z[chosen].copy()


def kmeans_fit(z, k: int, max_iters: int = 100, tol: float = 1e-6, seed: int = 0) -> ClusterModel:
    """Fit ``k`` centroids to the rows of ``z``.

    Rows are lexicographically sorted before seeding so the fit depends only on
    the multiset of rows, not their order.  A centroid left without points is
    moved onto the point farthest from its own centroid.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    n = len(z)
    if k < 1 or n < k:
        raise ValueError(f"k-means needs n >= K >= 1, got n={n}, K={k}")
    if max_iters < 1 or tol < 0:
        raise ValueError("max_iters must be >= 1 and tol >= 0")
    order = np.lexsort(z.T[::-1])
    zs = z[order]
    rng = np.random.default_rng(seed)
    cent = _kmeanspp(zs, k, rng)
    history = []
    repairs = 0
    it = 0
    for it in range(1, max_iters + 1):
        d2 = squared_distances(zs, cent)
        lab = np.argmin(d2, axis=1)
        own = d2[np.arange(n), lab]
        history.append(float(own.sum()))
        new = cent.copy()
        counts = np.bincount(lab, minlength=k)
        sums = np.zeros_like(cent)
        np.add.at(sums, lab, zs)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        taken = set()
        for j in np.flatnonzero(~filled):
            far = np.argsort(-own, kind="stable")
            pick = next(int(i) for i in far if int(i) not in taken)
            taken.add(pick)
            new[j] = zs[pick]
            repairs += 1
            log.debug("k-means: reseeded empty cluster %d at row %d", j, pick)
        shift = float(np.max(np.abs(new - cent)))
        cent = new
        if shift <= tol:
            break
    d2 = squared_distances(zs, cent)
    inertia = float(d2[np.arange(n), np.argmin(d2, axis=1)].sum())
    return ClusterModel(cent, inertia, it, tuple(history), repairs)


def assign_pseudo_labels(model: ClusterModel, z, epoch: int | None = None) -> PseudoLabels:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != model.centroids.shape[1]:
        raise ValueError(
            f"embedding width {z.shape[1]} != centroid width {model.centroids.shape[1]}")
    return PseudoLabels(np.argmin(squared_distances(z, model.centroids), axis=1), epoch)
