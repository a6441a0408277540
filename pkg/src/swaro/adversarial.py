"""Perturbation generation.

Contrastive attacks (used during pretraining):

* :func:`swaro_perturb` -- cluster-guided attack on permuted pairs.  Each
  first view is pushed by ``eta * beta * sign(grad)``, so the loss against
  its permuted partner goes up when both share a pseudo-label (``beta=+1``)
  and down otherwise.
* :func:`instance_perturb` -- the plain instance-wise attack, i.e. the same
  update with the identity pairing and ``beta=+1``.

Supervised attacks (used for evaluation): FGSM, BIM, PGD and Jitter against
an encoder+probe classifier, under l-inf, l2 or l1 budgets.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .contrastive import LossConfig, pair_loss_rows
from .data import PairBatch
from .encoder import EncoderParams, embed_numpy, encode

NORMS = ("linf", "l2", "l1")
METHODS = ("FGSM", "BIM", "PGD", "Jitter")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of a gradient attack.

    ``epsilon`` and ``step_size`` are in data units; every dataset here lives
    on ``[0, 1]`` so they double as fractions of the domain range.
    """

    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 1 / 255
    steps: int = 7
    random_start: bool = True
    clamp_to_domain: bool = True
    targeted: bool = False
    target_label: int | None = None
    jitter_noise: float = 0.1

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.targeted and self.target_label is None:
            raise ValueError("targeted attacks need a target_label")

    @classmethod
    def for_budget(cls, norm: str, epsilon: float, steps: int = 10, **kw) -> "AttackConfig":
        """Config with the usual ``2.5 * eps / steps`` step size."""
        step = 2.5 * epsilon / steps if epsilon > 0 else 1e-3
        return cls(norm=norm, epsilon=epsilon, step_size=step, steps=steps, **kw)


# ------------------------------------------------------------ projections


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Row-wise Euclidean projection onto the l1 ball (sort-based, O(d log d))."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    out = v.copy()
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    outside = a.sum(axis=1) > radius
    if not outside.any():
        return out
    u = -np.sort(-a[outside], axis=1)
    css = np.cumsum(u, axis=1)
    k = np.arange(1, u.shape[1] + 1)
    cond = u * k > css - radius
    rho = u.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(u)), rho] - radius) / (rho + 1.0)
    w = np.maximum(a[outside] - theta[:, None], 0.0)
    out[outside] = np.sign(v[outside]) * w
    # floating point can leave the sum a hair above the radius
    s = np.abs(out[outside]).sum(axis=1)
    over = s > radius
    if over.any():
        rows = np.flatnonzero(outside)[over]
        out[rows] *= (radius / s[over])[:, None]
    return out


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Projection of each row of ``delta`` onto the ``norm`` ball of radius ``epsilon``."""
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        d = np.atleast_2d(delta)
        n = np.sqrt((d * d).sum(axis=1, keepdims=True))
        factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        return (d * factor).reshape(delta.shape)
    if norm == "l1":
        return project_l1_ball(delta, epsilon).reshape(delta.shape)
    raise ValueError(f"unknown norm {norm!r}")


def clamp_to_domain(x: np.ndarray, delta: np.ndarray, lower, upper) -> np.ndarray:
    """Shrink ``delta`` so ``x + delta`` stays in ``[lower, upper]``.

    Entries already inside are returned untouched (no ``(x + d) - x`` round
    trip), which keeps sign-symmetric updates exactly antisymmetric.
    """
    lower = np.broadcast_to(lower, x.shape)
    upper = np.broadcast_to(upper, x.shape)
    moved = x + delta
    out = np.where(moved > upper, upper - x, delta)
    return np.where(moved < lower, lower - x, out)


def random_start(shape, norm: str, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the ``norm`` ball, one per row."""
    n, d = shape
    if epsilon == 0:
        return np.zeros(shape)
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    radius = rng.random((n, 1)) ** (1.0 / d)
    if norm == "l2":
        g = rng.standard_normal(shape)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        return epsilon * radius * g
    e = rng.exponential(size=(n, d + 1))
    point = e[:, :d] / e.sum(axis=1, keepdims=True)
    return epsilon * point * rng.choice([-1.0, 1.0], size=shape)


def steepest_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    """Unit-norm ascent direction of a linearised objective, row-wise."""
    if norm == "linf":
        return np.sign(grad)
    if norm == "l2":
        n = np.linalg.norm(grad, axis=1, keepdims=True)
        return np.where(n > 0, grad / np.where(n > 0, n, 1.0), 0.0)
    # l1: spread a unit step over the largest-magnitude coordinates
    d = grad.shape[1]
    k = max(1, int(np.ceil(0.05 * d)))
    top = np.argsort(-np.abs(grad), axis=1, kind="stable")[:, :k]
    out = np.zeros_like(grad)
    rows = np.arange(len(grad))[:, None]
    out[rows, top] = np.sign(grad[rows, top]) / k
    return out


def _finalize(x, delta, atk: AttackConfig, lower, upper):
    delta = project(delta, atk.norm, atk.epsilon)
    if atk.clamp_to_domain:
        delta = clamp_to_domain(x, delta, lower, upper)
    return delta


# ----------------------------------------------------- contrastive attacks


def pair_indicator(y1, y2):
    """+1 where the pseudo-labels agree, -1 where they differ."""
    y1, y2 = np.asarray(y1), np.asarray(y2)
    out = np.where(y1 == y2, 1, -1)
    return int(out) if out.ndim == 0 else out


def permute_pairs(batch: PairBatch, seed) -> PairBatch:
    if batch.permuted:
        raise ValueError("batch is already permuted")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = rng.permutation(len(batch))
    return replace(batch, sigma=sigma, permuted=True, beta=None)


def assign_indicators(batch: PairBatch, pseudo1, pseudo2) -> PairBatch:
    """Set ``beta`` from pseudo-labels of first views and (unpermuted) second views."""
    pseudo1 = np.asarray(pseudo1)
    pseudo2 = np.asarray(pseudo2)
    beta = pair_indicator(pseudo1, pseudo2[batch.sigma])
    return replace(batch, pseudo1=pseudo1, pseudo2=pseudo2, beta=np.atleast_1d(beta))


def reorder_to_original(batch: PairBatch, delta) -> PairBatch:
    """Pair each perturbed first view with its own second view again."""
    if delta is None:
        raise ValueError("reorder_to_original needs the perturbations")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != batch.view1.shape:
        raise ValueError(f"perturbation shape {delta.shape} != view shape {batch.view1.shape}")
    return replace(batch, sigma=np.arange(len(batch)), delta=delta, permuted=False)


def contrastive_perturb(params: EncoderParams, view1: np.ndarray, view2: np.ndarray, partner,
                        beta, loss_cfg: LossConfig, atk: AttackConfig, seed=0,
                        lower=0.0, upper=1.0, transcript: list | None = None) -> np.ndarray:
    """Signed contrastive attack on every first view of a batch.

    Row ``i`` ascends (``beta[i] = +1``) or descends (``beta[i] = -1``) the
    NT-XENT of ``f(view1[i] + delta[i])`` against positive ``f(view2[partner[i]])``
    with all other views of the batch as negatives.  The negatives are held
    fixed within each iteration, so row ``i`` of the gradient involves only
    that row's own loss term.
    """
    view1 = np.asarray(view1, dtype=np.float64)
    b = len(view1)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (b,))
    partner = np.asarray(partner, dtype=np.int64)
    if atk.epsilon == 0:
        return np.zeros_like(view1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if atk.random_start:
        delta = _finalize(view1, random_start(view1.shape, atk.norm, atk.epsilon, rng),
                          atk, lower, upper)
    else:
        delta = np.zeros_like(view1)
    ctx2 = dc.Tensor(embed_numpy(params, view2))
    for t in range(atk.steps):
        d = dc.Tensor(delta, requires_grad=True)
        with dc.Tape() as tape:
            z = encode(params, dc.add(dc.Tensor(view1), d)).embedding
            rows = pair_loss_rows(z, z.detach(), ctx2, partner, loss_cfg)
            total = dc.sum(rows)
        (g,) = dc.backward(tape, total, [d])
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at attack iteration {t}")
        step = atk.step_size * beta[:, None] * steepest_direction(g, atk.norm)
        delta = _finalize(view1, delta + step, atk, lower, upper)
        if transcript is not None:
            transcript.append({"iteration": t, "loss": float(total.item()) / b,
                               "max_abs_delta": float(np.abs(delta).max())})
    return delta


def swaro_perturb(batch: PairBatch, params: EncoderParams, loss_cfg: LossConfig,
                  atk: AttackConfig, seed=0, lower=0.0, upper=1.0,
                  transcript: list | None = None) -> np.ndarray:
    """Cluster-guided perturbations for a permuted batch with indicators set."""
    if not batch.permuted or batch.beta is None:
        raise ValueError("swaro_perturb needs a permuted batch with indicators assigned")
    return contrastive_perturb(params, batch.view1, batch.view2, batch.sigma, batch.beta,
                               loss_cfg, atk, seed, lower, upper, transcript)


def instance_perturb(batch: PairBatch, params: EncoderParams, loss_cfg: LossConfig,
                     atk: AttackConfig, seed=0, lower=0.0, upper=1.0,
                     transcript: list | None = None) -> np.ndarray:
    """Untargeted instance-wise perturbations: maximise each pair's own loss."""
    if batch.permuted:
        raise ValueError("instance_perturb expects the original pairing")
    return contrastive_perturb(params, batch.view1, batch.view2, np.arange(len(batch)), 1.0,
                               loss_cfg, atk, seed, lower, upper, transcript)


# ------------------------------------------------------ supervised attacks


def cross_entropy_rows(logits: dc.Tensor, y) -> dc.Tensor:
    """Per-row ``-log softmax(logits)[y]`` with a max shift."""
    return dc.sub(dc.logsumexp(logits, axis=1), dc.pick(logits, y))


def jitter_loss_rows(logits: dc.Tensor, y, num_classes: int, noise: np.ndarray) -> dc.Tensor:
    """Squared error between noisy, l-inf-normalised logits and the one-hot target."""
    scale = dc.add(dc.amax(dc.absolute(logits), axis=1, keepdims=True), 1e-12)
    z = dc.div(logits, dc.expand(scale, logits.shape))
    z = dc.add(z, dc.Tensor(noise))
    onehot = np.eye(num_classes)[np.asarray(y)]
    return dc.sum(dc.square(dc.sub(z, dc.Tensor(onehot))), axis=1)


def supervised_attack(x, y, logits_fn: Callable[[dc.Tensor], dc.Tensor], method: str,
                      atk: AttackConfig, seed=0, lower=0.0, upper=1.0,
                      transcript: list | None = None) -> np.ndarray:
    """Adversarial inputs against a differentiable classifier.

    In targeted mode ``y`` holds the target classes and the loss is descended.
    FGSM is one BIM step of size ``epsilon`` from zero; BIM starts at zero;
    PGD and Jitter start uniformly inside the ball.
    """
    if method not in METHODS:
        raise ValueError(f"unknown attack method {method!r}; expected one of {METHODS}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if atk.epsilon == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if method == "FGSM":
        atk = replace(atk, step_size=atk.epsilon, steps=1)
    if method in ("PGD", "Jitter"):
        delta = _finalize(x, random_start(x.shape, atk.norm, atk.epsilon, rng), atk, lower, upper)
    else:
        delta = np.zeros_like(x)
    direction = -1.0 if atk.targeted else 1.0
    for t in range(atk.steps):
        d = dc.Tensor(delta, requires_grad=True)
        with dc.Tape() as tape:
            logits = logits_fn(dc.add(dc.Tensor(x), d))
            if method == "Jitter":
                noise = atk.jitter_noise * rng.standard_normal(logits.shape)
                rows = jitter_loss_rows(logits, y, logits.shape[1], noise)
            else:
                rows = cross_entropy_rows(logits, y)
            total = dc.sum(rows)
        (g,) = dc.backward(tape, total, [d])
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at attack iteration {t}")
        delta = _finalize(x, delta + direction * atk.step_size * steepest_direction(g, atk.norm),
                          atk, lower, upper)
        if transcript is not None:
            transcript.append({"iteration": t, "loss": float(total.item()) / len(x),
                               "max_abs_delta": float(np.abs(delta).max())})
    adv = x + delta
    return np.clip(adv, lower, upper) if atk.clamp_to_domain else adv


def write_transcript(path: str | os.PathLike, transcript: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "loss", "max_abs_delta"])
        w.writeheader()
        w.writerows(transcript)
