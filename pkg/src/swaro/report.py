"""Matplotlib figures written next to the CSV/JSON outputs (Agg, no display)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | os.PathLike) -> str:
    path = os.fspath(path)
    tmp = path + ".tmp.png"
    fig.savefig(tmp, format="png", dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def training_curve(log, path) -> str:
    """Contrastive loss per epoch, with the SwARo share of batches on a twin axis."""
    epochs = [r.epoch for r in log.records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r.loss for r in log.records], color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("contrastive loss")
    share = [r.swaro_batches / r.batches if r.batches else 0.0 for r in log.records]
    if any(share):
        ax2 = ax.twinx()
        ax2.plot(epochs, share, color="tab:orange", ls="--", label="SwARo batches")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("SwARo share")
    ax.set_title("pretraining")
    return _save(fig, path)


def ablation_plot(rows, budgets, path) -> str:
    """Clean and robust accuracy against the swept value."""
    ok = [r for r in rows if r.status == "ok"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if ok:
        xs = [float(r.value) for r in ok]
        ax.plot(xs, [r.report.clean_accuracy for r in ok], marker="o", label="clean")
        for norm, eps in budgets:
            ax.plot(xs, [r.report.robust("PGD", norm, eps) for r in ok], marker=".",
                    label=f"PGD {norm} {eps:.3g}")
        ax.set_xlabel(ok[0].axis)
        ax.legend(fontsize=7)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)


def embedding_scatter(coords: np.ndarray, labels, path) -> str:
    fig, ax = plt.subplots(figsize=(4, 4))
    labels = np.asarray(labels) if labels is not None else np.zeros(len(coords), int)
    for lab in np.unique(labels):
        m = labels == lab
        ax.scatter(coords[m, 0], coords[m, 1], s=6, label=str(lab))
    if len(np.unique(labels)) <= 10:
        ax.legend(fontsize=7, markerscale=2)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    return _save(fig, path)


def accuracy_bars(report, path) -> str:
    """One bar per evaluation row of an EvalReport."""
    rows = report.rows()
    names = ["clean" if r["method"] == "clean" else f"{r['method']}\n{r['norm']} {r['epsilon']:.3g}"
             for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(rows)), 3.2))
    ax.bar(range(len(rows)), [r["accuracy"] for r in rows], color="tab:green")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, fontsize=7)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("accuracy")
    return _save(fig, path)
