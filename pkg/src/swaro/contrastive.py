"""Cosine similarity and the NT-XENT contrastive loss.

Two denominator conventions are supported:

``"eq1"``
    negatives only: the anchor itself and its positive are both excluded.
``"include-positive"``
    SimCLR style: only the anchor itself is excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import PairBatch

CONVENTIONS = ("eq1", "include-positive")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    convention: str = "eq1"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown denominator convention {self.convention!r}")


def cosine_sim(u, v) -> dc.Tensor:
    u, v = dc.as_tensor(u), dc.as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise dc.ShapeError(f"cosine_sim: need equal-width vectors, got {u.shape} and {v.shape}")
    return dc.div(dc.sum(dc.mul(u, v)), dc.mul(dc.l2norm(u), dc.l2norm(v)))


def similarity_matrix(anchors: dc.Tensor, context: dc.Tensor) -> dc.Tensor:
    """Cosine similarity of every anchor row against every context row."""
    if anchors.shape[1] != context.shape[1]:
        raise dc.ShapeError(
            f"similarity_matrix: widths differ, {anchors.shape} vs {context.shape}")
    return dc.matmul(dc.normalize_rows(anchors), dc.transpose(dc.normalize_rows(context)))


def ntxent_rows(sim: dc.Tensor, positive, exclude, cfg: LossConfig) -> dc.Tensor:
    """Per-row NT-XENT from a precomputed similarity matrix.

    ``positive[r]`` is the positive column of row ``r``; ``exclude[r]`` is the
    anchor's own column (or -1 if the anchor is not among the columns).
    """
    n_rows, n_cols = sim.shape
    rows = np.arange(n_rows)
    positive = np.asarray(positive, dtype=np.int64)
    exclude = np.asarray(exclude, dtype=np.int64)
    keep = np.ones((n_rows, n_cols), dtype=bool)
    has_self = exclude >= 0
    keep[rows[has_self], exclude[has_self]] = False
    if cfg.convention == "eq1":
        keep[rows, positive] = False
    if not keep.any(axis=1).all():
        raise ValueError(
            "NT-XENT denominator is empty: the eq1 convention needs at least one negative")
    logits = dc.scale(sim, 1.0 / cfg.temperature)
    return dc.sub(dc.logsumexp(logits, axis=1, mask=keep), dc.pick(logits, positive))


def ntxent(i: int, k: int, embeddings, cfg: LossConfig = LossConfig()) -> dc.Tensor:
    """Loss of anchor ``i`` with positive ``k`` against every other embedding."""
    z = embeddings if isinstance(embeddings, dc.Tensor) else dc.concat_rows(
        [dc.expand(dc.as_tensor(e), (1, dc.as_tensor(e).shape[-1])) for e in embeddings])
    if i == k:
        raise ValueError("anchor and positive must differ")
    if z.shape[0] < 2:
        raise ValueError("NT-XENT needs at least two embeddings")
    anchor = dc.take_rows(z, [i])
    sim = similarity_matrix(anchor, z)
    return dc.sum(ntxent_rows(sim, [k], [i], cfg))


def pair_loss_rows(anchors: dc.Tensor, view1_ctx: dc.Tensor, view2_ctx: dc.Tensor,
                   partner, cfg: LossConfig) -> dc.Tensor:
    """NT-XENT of each first view against the stacked batch of views.

    Columns are ``[view1_ctx; view2_ctx]``.  Anchor ``r`` excludes its own
    column ``r`` and treats column ``B + partner[r]`` as the positive.
    """
    b = anchors.shape[0]
    ctx = dc.concat_rows([view1_ctx, view2_ctx])
    sim = similarity_matrix(anchors, ctx)
    return ntxent_rows(sim, b + np.asarray(partner), np.arange(b), cfg)


def batch_contrastive_loss(z1: dc.Tensor, z2: dc.Tensor, cfg: LossConfig = LossConfig()) -> dc.Tensor:
    """Mean NT-XENT over anchors ``z1[i]`` with positives ``z2[i]``.

    ``z1`` are the encoded (possibly perturbed) first views, ``z2`` the second
    views in their original order.  The negatives of anchor ``i`` are all
    other rows of both matrices.
    """
    if z1.shape != z2.shape:
        raise dc.ShapeError(f"view embeddings differ in shape: {z1.shape} vs {z2.shape}")
    rows = pair_loss_rows(z1, z1, z2, np.arange(z1.shape[0]), cfg)
    return dc.mean(rows)


def pair_batch_loss(params, batch: PairBatch, cfg: LossConfig = LossConfig()) -> dc.Tensor:
    """Training loss of a batch whose pairs are back in original order."""
    from .encoder import encode

    if batch.permuted:
        raise ValueError("batch must be reordered to its original pairing before the loss")
    z1 = encode(params, dc.Tensor(batch.adversarial_view1())).embedding
    z2 = encode(params, dc.Tensor(batch.view2)).embedding
    return batch_contrastive_loss(z1, z2, cfg)
