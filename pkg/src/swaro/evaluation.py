"""Linear-probe protocols and attack evaluation on frozen encoders."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .adversarial import AttackConfig, cross_entropy_rows, supervised_attack
from .data import Dataset
from .encoder import EncoderParams, atomic_write_bytes, backbone, embed_numpy

CLEAN_LR = 0.01
ROBUST_LR = 0.02


def cross_entropy(logits, y) -> dc.Tensor:
    """Mean cross-entropy of a batch of logits (a single vector is one row)."""
    logits = dc.as_tensor(logits)
    if logits.ndim == 1:
        logits = dc.expand(logits, (1, logits.shape[0]))
    return dc.mean(cross_entropy_rows(logits, np.atleast_1d(y)))


@dataclass(frozen=True)
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    epochs: int = 0
    final_loss: float | None = None
    robust: bool = False

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def logits_fn(self, params: EncoderParams, weight: dc.Tensor | None = None,
                  bias: dc.Tensor | None = None):
        w = dc.Tensor(self.weight) if weight is None else weight
        b = dc.Tensor(self.bias) if bias is None else bias

        def fn(x: dc.Tensor) -> dc.Tensor:
            return dc.add_rowvec(dc.matmul(backbone(params, x), w), b)

        return fn

    def predict(self, params: EncoderParams, x: np.ndarray) -> np.ndarray:
        feats = embed_numpy(params, x, which="representation")
        return np.argmax(feats @ self.weight + self.bias, axis=1)


def init_probe(rep_dim: int, num_classes: int, seed: int = 0) -> LinearProbe:
    rng = np.random.default_rng(seed)
    return LinearProbe(0.01 * rng.standard_normal((rep_dim, num_classes)), np.zeros(num_classes))


def train_linear_probe(params: EncoderParams, ds: Dataset, epochs: int = 100,
                       lr: float | None = None, seed: int = 0, robust: bool = False,
                       atk: AttackConfig | None = None, batch_size: int = 64,
                       momentum: float = 0.9, refresh: str = "step") -> LinearProbe:
    """SGD on cross-entropy over frozen backbone features.

    In robust mode each minibatch is replaced by PGD examples crafted against
    the current encoder+probe (``refresh="step"``), or against the probe as it
    stood at the start of the epoch (``refresh="epoch"``).
    """
    if not ds.labeled:
        raise ValueError("linear probe training needs a labelled dataset")
    if robust and atk is None:
        raise ValueError("robust probe training needs an attack config")
    if refresh not in ("step", "epoch"):
        raise ValueError("refresh must be 'step' or 'epoch'")
    lr = (ROBUST_LR if robust else CLEAN_LR) if lr is None else lr
    probe = init_probe(params.representation_dim, ds.num_classes, seed)
    if epochs == 0 or len(ds) == 0:
        return probe
    rng = np.random.default_rng(seed + 1)
    w, b = probe.weight.copy(), probe.bias.copy()
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    clean_feats = None if robust else embed_numpy(params, ds.features, which="representation")
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(ds))
        snapshot = LinearProbe(w.copy(), b.copy())
        losses = []
        for s in range(0, len(ds), batch_size):
            idx = order[s:s + batch_size]
            y = ds.labels[idx]
            if robust:
                current = snapshot if refresh == "epoch" else LinearProbe(w, b)
                x_adv = supervised_attack(ds.features[idx], y, current.logits_fn(params), "PGD",
                                          atk, rng, ds.lower, ds.upper)
                feats = embed_numpy(params, x_adv, which="representation")
            else:
                feats = clean_feats[idx]
            wt, bt = dc.Tensor(w, requires_grad=True), dc.Tensor(b, requires_grad=True)
            with dc.Tape() as tape:
                loss = cross_entropy(dc.add_rowvec(dc.matmul(dc.Tensor(feats), wt), bt), y)
            gw, gb = dc.backward(tape, loss, [wt, bt])
            vw = momentum * vw + gw
            vb = momentum * vb + gb
            w = w - lr * vw
            b = b - lr * vb
            losses.append(loss.item())
        last = float(np.mean(losses))
        if not np.isfinite(last):
            raise FloatingPointError("linear probe loss diverged")
    return LinearProbe(w, b, epochs, last, robust)


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalEntry:
    method: str
    norm: str
    epsilon: float
    targeted: bool
    accuracy: float
    count: int

    @property
    def key(self) -> tuple:
        return (self.method, self.norm, self.epsilon, self.targeted)


CLEAN = ("clean", "none", 0.0, False)


def _targets(ds: Dataset, atk: AttackConfig) -> np.ndarray:
    if atk.target_label is not None:
        return np.full(len(ds), int(atk.target_label))
    return (ds.labels + 1) % ds.num_classes


def evaluate(params: EncoderParams, probe: LinearProbe, ds: Dataset,
             atk: AttackConfig | None = None, method: str = "PGD", seed: int = 0,
             source: tuple[EncoderParams, LinearProbe] | None = None) -> EvalEntry:
    """Accuracy of encoder+probe, optionally on attacked inputs.

    Attacks are white-box against ``(params, probe)`` unless ``source`` names a
    different model to craft them on.
    """
    if not ds.labeled or len(ds) == 0:
        raise ValueError("evaluation needs a non-empty labelled dataset")
    if atk is None:
        pred = probe.predict(params, ds.features)
        return EvalEntry(*CLEAN[:3], False, float(np.mean(pred == ds.labels)), len(ds))
    src_params, src_probe = source if source is not None else (params, probe)
    y = _targets(ds, atk) if atk.targeted else ds.labels
    x_adv = supervised_attack(ds.features, y, src_probe.logits_fn(src_params), method, atk,
                              seed, ds.lower, ds.upper)
    pred = probe.predict(params, x_adv)
    return EvalEntry(method, atk.norm, float(atk.epsilon), atk.targeted,
                     float(np.mean(pred == ds.labels)), len(ds))


def black_box_eval(source: tuple[EncoderParams, LinearProbe],
                   target: tuple[EncoderParams, LinearProbe], ds: Dataset,
                   atk: AttackConfig, method: str = "PGD", seed: int = 0) -> EvalEntry:
    """Transfer attack: craft on ``source``, score ``target``."""
    if source[0].input_dim != target[0].input_dim:
        raise ValueError("source and target models take different input widths")
    return evaluate(target[0], target[1], ds, atk, method, seed, source=source)


@dataclass
class EvalReport:
    clean_accuracy: float
    entries: list[EvalEntry] = field(default_factory=list)
    count: int = 0
    seeds: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def robust(self, method="PGD", norm="linf", epsilon=8 / 255, targeted=False) -> float:
        for e in self.entries:
            if e.key == (method, norm, float(epsilon), targeted):
                return e.accuracy
        raise KeyError((method, norm, epsilon, targeted))

    def rows(self) -> list[dict]:
        out = [asdict(EvalEntry(*CLEAN, self.clean_accuracy, self.count))]
        out += [asdict(e) for e in self.entries]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["method", "norm", "epsilon", "targeted",
                                            "accuracy", "count"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"clean_accuracy": self.clean_accuracy, "count": self.count,
               "entries": [asdict(e) for e in self.entries], "seeds": self.seeds,
               "metadata": self.metadata}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, stem: str | os.PathLike):
        stem = os.fspath(stem)
        atomic_write_bytes(stem + ".csv", self.to_csv().encode())
        atomic_write_bytes(stem + ".json", self.to_json().encode())


def evaluation_report(params: EncoderParams, probe: LinearProbe, ds: Dataset,
                      attacks: list[tuple[str, AttackConfig]], seed: int = 0,
                      metadata: dict | None = None) -> EvalReport:
    clean = evaluate(params, probe, ds)
    entries = [evaluate(params, probe, ds, atk, method, seed) for method, atk in attacks]
    return EvalReport(clean.accuracy, entries, len(ds), {"attack": seed}, metadata or {})


# ------------------------------------------------------------ 2-D export


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, iters: int = 5000,
                     tol: float = 1e-13) -> tuple[np.ndarray, float]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = cov @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return np.zeros_like(v), 0.0
        w /= nw
        lam_new = float(w @ cov @ w)
        # stop on the vector; the Rayleigh quotient settles much earlier
        if np.linalg.norm(w - v) < tol:
            v, lam = w, lam_new
            break
        v, lam = w, lam_new
    return v, lam


def pca_2d(z: np.ndarray, seed: int = 0) -> np.ndarray:
    """Projection of mean-centred rows onto the top two principal directions."""
    z = np.asarray(z, dtype=np.float64)
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / max(len(z) - 1, 1)
    rng = np.random.default_rng(seed)
    coords = np.zeros((len(z), 2))
    if not np.any(cov):
        warnings.warn("embedding covariance has rank 0; exporting all-zero coordinates",
                      RuntimeWarning, stacklevel=2)
        return coords
    scale = np.abs(cov).max()
    for k in range(2):
        v, lam = _power_iteration(cov, rng)
        if lam <= 1e-12 * scale:
            break
        coords[:, k] = zc @ v
        cov = cov - lam * np.outer(v, v)
    return coords


def export_embeddings_2d(params: EncoderParams, ds: Dataset, out_path: str | os.PathLike | None,
                         which: str = "representation", seed: int = 0) -> np.ndarray:
    """Write ``x,y,label`` rows of the 2-D PCA of the dataset's embeddings."""
    if len(ds) == 0:
        raise ValueError("cannot export embeddings of an empty dataset")
    coords = pca_2d(embed_numpy(params, ds.features, which=which), seed)
    if out_path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
        for (a, b), lab in zip(coords, labels):
            w.writerow([repr(float(a)), repr(float(b)), int(lab)])
        atomic_write_bytes(out_path, buf.getvalue().encode())
    return coords
