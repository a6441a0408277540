"""Standard evaluation protocol and ablation sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

from ..adversarial import AttackConfig
from ..data import Dataset
from ..encoder import EncoderParams
from ..evaluation import EvalReport, LinearProbe, evaluation_report, train_linear_probe
from .config import RunConfig
from .training import split_dataset, train

log = logging.getLogger(__name__)

AXES = ("p", "K", "epochs")


def eval_attack(cfg: RunConfig, norm: str, epsilon: float, method: str = "PGD",
                targeted: bool = False, target_label: int | None = None) -> AttackConfig:
    return AttackConfig.for_budget(norm, epsilon, steps=cfg.eval_steps, targeted=targeted,
                                   target_label=target_label)


def fit_probe(params: EncoderParams, cfg: RunConfig, train_ds: Dataset,
              robust: bool = False) -> LinearProbe:
    atk = eval_attack(cfg, "linf", cfg.epsilon) if robust else None
    lr = cfg.robust_probe_lr if robust else cfg.probe_lr
    return train_linear_probe(params, train_ds, cfg.probe_epochs, lr, cfg.seed_init,
                              robust=robust, atk=atk, batch_size=cfg.probe_batch)


def standard_report(params: EncoderParams, cfg: RunConfig, train_ds: Dataset,
                    test_ds: Dataset, robust: bool = False) -> EvalReport:
    """Clean accuracy plus PGD accuracy at every configured budget."""
    probe = fit_probe(params, cfg, train_ds, robust)
    attacks = [("PGD", eval_attack(cfg, norm, eps)) for norm, eps in cfg.eval_budgets()]
    return evaluation_report(params, probe, test_ds, attacks, cfg.seed_attack,
                             {"protocol": "rLE" if robust else "LE", "run": cfg.name})


def _column(norm: str, eps: float) -> str:
    return f"{norm}_{eps:.6g}"


@dataclass
class AblationRow:
    axis: str
    value: float
    status: str
    report: EvalReport | None = None
    negative_pair_fraction: float | None = None
    swaro_batches: int = 0
    error: str | None = None


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "p":
        return replace(cfg, p=float(value))
    if axis == "K":
        return replace(cfg, clusters=int(value))
    if axis == "epochs":
        return replace(cfg, epochs=int(value))
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_ablation(base: RunConfig, axis: str, values, robust: bool = False) -> list[AblationRow]:
    """Train and evaluate one model per axis value; failures are recorded per cell."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    cells = [apply_axis(base, axis, v) for v in values]
    train_ds, test_ds = split_dataset(base)
    rows = []
    for value, cfg in zip(values, cells):
        cfg = replace(cfg, output_dir=None, name=f"{base.name}-{axis}={value}")
        try:
            result = train(cfg, train_ds)
            report = standard_report(result.params, cfg, train_ds, test_ds, robust)
        except Exception as exc:  # one bad cell must not sink the sweep
            log.warning("ablation cell %s=%s failed: %s", axis, value, exc)
            rows.append(AblationRow(axis, value, "error", error=f"{type(exc).__name__}: {exc}"))
            continue
        recs = result.log.records
        nsw = sum(r.swaro_batches for r in recs)
        fracs = [r.negative_pair_fraction * r.swaro_batches for r in recs
                 if r.negative_pair_fraction is not None]
        rows.append(AblationRow(axis, value, "ok", report,
                                sum(fracs) / nsw if nsw else None, nsw))
    return rows


def ablation_csv(rows: list[AblationRow], budgets: list[tuple[str, float]]) -> str:
    cols = ["axis", "value", "status", "A_nat"] + [_column(n, e) for n, e in budgets] + [
        "negative_pair_fraction", "swaro_batches", "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        rec = {"axis": r.axis, "value": r.value, "status": r.status, "error": r.error or "",
               "swaro_batches": r.swaro_batches,
               "negative_pair_fraction": "" if r.negative_pair_fraction is None
               else repr(r.negative_pair_fraction)}
        if r.report is not None:
            rec["A_nat"] = repr(r.report.clean_accuracy)
            for norm, eps in budgets:
                rec[_column(norm, eps)] = repr(r.report.robust("PGD", norm, eps))
        w.writerow(rec)
    return buf.getvalue()
