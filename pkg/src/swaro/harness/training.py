"""Adversarial contrastive pretraining loop with warmup and p-mixing."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from ..adversarial import (assign_indicators, instance_perturb, permute_pairs,
                           reorder_to_original, swaro_perturb)
from ..clustering import ClusterModel, assign_pseudo_labels, kmeans_fit
from ..contrastive import batch_contrastive_loss
from ..data import Dataset, gen_blobs, load_csv_dataset, make_pair_batch, train_test_split
from ..encoder import (EncoderParams, atomic_write_bytes, embed_numpy, encode, init_params,
                       load_checkpoint, save_checkpoint)
from .config import RunConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "loss", "batches", "swaro_batches", "negative_pair_fraction",
                 "inertia", "clustered", "checkpoint"]


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    batches: int
    swaro_batches: int
    negative_pair_fraction: float | None
    inertia: float | None
    clustered: bool
    wall_time: float
    checkpoint: str | None = None


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def metrics_csv(self) -> str:
        """Per-epoch metrics; wall time is kept out so reruns compare byte-for-byte."""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            row = {k: getattr(r, k) for k in METRIC_FIELDS}
            for k in ("loss", "negative_pair_fraction", "inertia"):
                row[k] = "" if row[k] is None else repr(float(row[k]))
            row["checkpoint"] = row["checkpoint"] or ""
            w.writerow(row)
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["epoch,wall_time"] + [f"{r.epoch},{r.wall_time:.6f}" for r in self.records]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: EncoderParams
    log: TrainingLog
    clusters: ClusterModel | None
    config: RunConfig


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "blobs":
        return gen_blobs(cfg.n_samples, cfg.n_classes, cfg.dim, cfg.spread, cfg.seed_data,
                         box=cfg.blob_box)
    return load_csv_dataset(cfg.csv_path, {"width": cfg.csv_width, "lower": cfg.csv_lower,
                                           "upper": cfg.csv_upper})


def split_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return train_test_split(build_dataset(cfg), cfg.test_fraction, cfg.seed_data)


def _batch_seed(base: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([base, epoch, batch]).generate_state(1)[0])


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    if n <= size:
        return [order]
    return [order[s:s + size] for s in range(0, n - size + 1, size)]


def _echo(cfg: RunConfig) -> dict:
    # where a run was written is not part of what it computed
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def checkpoint_metadata(cfg: RunConfig, epoch: int, clusters: ClusterModel | None) -> dict:
    meta = {"config": _echo(cfg), "epoch": epoch}
    if clusters is not None:
        meta["clusters"] = {"k": clusters.k, "inertia": clusters.inertia,
                            "iterations_run": clusters.iterations_run}
    return meta


def _save(path: str, params, cfg, epoch, clusters):
    extra = {"clusters.centroids": clusters.centroids} if clusters is not None else None
    save_checkpoint(path, params, checkpoint_metadata(cfg, epoch, clusters), extra)


def train(cfg: RunConfig, train_ds: Dataset | None = None) -> TrainResult:
    """Pretrain an encoder under ``cfg``; fully determined by its seeds.

    Each epoch past warmup refits k-means on the current head outputs.  Each
    batch then picks, with probability ``p``, the cluster-guided attack on
    permuted pairs, and otherwise the instance-wise attack; with
    ``adversarial`` off the views are used unperturbed.
    """
    if train_ds is None:
        train_ds, _ = split_dataset(cfg)
    if train_ds.width != cfg.input_dim:
        raise TrainingError(f"dataset width {train_ds.width} != configured {cfg.input_dim}")
    if len(train_ds) < 2:
        raise TrainingError("need at least two training samples")
    params = init_params([cfg.input_dim, *cfg.backbone], list(cfg.head), cfg.seed_init,
                         cfg.activation)
    loss_cfg = cfg.loss_config()
    atk = cfg.attack_config()
    aug = cfg.augmentation()
    shuffle_rng = np.random.default_rng(cfg.seed_data)
    mix_rng = np.random.default_rng(cfg.seed_mix)
    perm_rng = np.random.default_rng(cfg.seed_perm)
    atk_rng = np.random.default_rng(cfg.seed_attack)
    velocity = [np.zeros_like(t.data) for t in params.tensors()]
    use_swaro = cfg.adversarial and cfg.p > 0
    lo, hi = train_ds.lower, train_ds.upper

    ckpt_dir = os.path.join(cfg.output_dir, "checkpoints") if cfg.output_dir else None
    history = TrainingLog()
    clusters: ClusterModel | None = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        past_warmup = epoch > cfg.warmup_epochs
        clustered = False
        if use_swaro and past_warmup and (epoch - cfg.warmup_epochs - 1) % cfg.cluster_every == 0:
            z = embed_numpy(params, train_ds.features)
            clusters = kmeans_fit(z, min(cfg.num_clusters, len(z)), cfg.kmeans_iters, 1e-8,
                                  cfg.seed_cluster + epoch)
            clustered = True
        losses, n_swaro, n_neg, n_pairs = [], 0, 0, 0
        for bi, idx in enumerate(_batches(len(train_ds), cfg.batch_size, shuffle_rng)):
            batch = make_pair_batch(train_ds, idx, aug, _batch_seed(cfg.seed_augment, epoch, bi))
            if cfg.adversarial:
                pick_swaro = bool(mix_rng.random() < cfg.p) and past_warmup and clusters is not None
                if pick_swaro:
                    batch = permute_pairs(batch, perm_rng)
                    y1 = assign_pseudo_labels(clusters, embed_numpy(params, batch.view1)).labels
                    y2 = assign_pseudo_labels(clusters, embed_numpy(params, batch.view2)).labels
                    batch = assign_indicators(batch, y1, y2)
                    delta = swaro_perturb(batch, params, loss_cfg, atk, atk_rng, lo, hi)
                    n_swaro += 1
                    n_neg += int(np.sum(batch.beta < 0))
                    n_pairs += len(batch)
                    batch = reorder_to_original(batch, delta)
                else:
                    delta = instance_perturb(batch, params, loss_cfg, atk, atk_rng, lo, hi)
                    batch = reorder_to_original(batch, delta)
            tracked = params.tracked()
            leaves = tracked.tensors()
            b = len(batch)
            with dc.Tape() as tape:
                views = dc.Tensor(np.concatenate([batch.adversarial_view1(), batch.view2]))
                z = encode(tracked, views).embedding
                loss = batch_contrastive_loss(dc.take_rows(z, np.arange(b)),
                                              dc.take_rows(z, np.arange(b, 2 * b)), loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = dc.backward(tape, loss, leaves)
            new = []
            for i, (t, g) in enumerate(zip(params.tensors(), grads)):
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * t.data
                velocity[i] = cfg.momentum * velocity[i] + g
                new.append(dc.Tensor(t.data - cfg.lr * velocity[i]))
            params = params.from_tensors(new)
            losses.append(value)
        ckpt = None
        if ckpt_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            # logged relative to output_dir so relocated reruns compare equal
            ckpt = os.path.join("checkpoints", f"epoch_{epoch:04d}.ckpt")
            _save(os.path.join(cfg.output_dir, ckpt), params, cfg, epoch, clusters)
        history.records.append(EpochRecord(
            epoch=epoch, loss=float(np.mean(losses)), batches=len(losses), swaro_batches=n_swaro,
            negative_pair_fraction=(n_neg / n_pairs) if n_pairs else None,
            inertia=clusters.inertia if clustered else None, clustered=clustered,
            wall_time=time.perf_counter() - t0, checkpoint=ckpt))
        log.info("epoch %d loss %.4f swaro %d/%d", epoch, history.records[-1].loss, n_swaro,
                 len(losses))
    result = TrainResult(params, history, clusters, cfg)
    if cfg.output_dir:
        write_outputs(result, cfg.output_dir)
    return result


def write_outputs(result: TrainResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    _save(os.path.join(out_dir, "final.ckpt"), result.params, cfg, cfg.epochs, result.clusters)
    atomic_write_bytes(os.path.join(out_dir, "metrics.csv"), result.log.metrics_csv().encode())
    atomic_write_bytes(os.path.join(out_dir, "timing.csv"), result.log.timing_csv().encode())
    summary = {
        "name": cfg.name,
        "epochs": len(result.log),
        "final_loss": result.log.losses[-1],
        "first_loss": result.log.losses[0],
        "swaro_batches": sum(r.swaro_batches for r in result.log.records),
        "batches": sum(r.batches for r in result.log.records),
        "config": _echo(cfg),
    }
    atomic_write_bytes(os.path.join(out_dir, "summary.json"),
                       (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())


def load_trained(path: str) -> tuple[EncoderParams, RunConfig | None, dict]:
    from .config import config_from_dict

    ckpt = load_checkpoint(path)
    doc = ckpt.metadata.get("config")
    return ckpt.params, (config_from_dict(doc) if doc else None), ckpt.metadata
