"""Command line entry point: ``swaro <subcommand> ...``.

Every subcommand prints a delimited (CSV) table on stdout and writes its
files atomically, so a failed run leaves nothing half-written.  Exit status
is 0 on success, 2 on usage errors and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .adversarial import METHODS, NORMS
from .data import Dataset, load_csv_dataset, train_test_split
from .encoder import CheckpointError
from .evaluation import EvalReport, black_box_eval, evaluate, export_embeddings_2d
from .harness.config import ConfigError, RunConfig, load_config, parse_number
from .harness.protocol import (AXES, ablation_csv, eval_attack, fit_probe, run_ablation,
                               standard_report)
from .harness.training import TrainingError, load_trained, split_dataset, train

log = logging.getLogger("swaro")


class CliError(RuntimeError):
    pass


def _require_file(path: str, what: str):
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


def _load_model(path: str):
    _require_file(path, "checkpoint")
    params, cfg, meta = load_trained(path)
    return params, cfg or RunConfig(dim=params.input_dim), meta


def _datasets(spec: str, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test split from the checkpoint's config echo or from a CSV file."""
    if spec == "config":
        return split_dataset(cfg)
    _require_file(spec, "dataset")
    lower, upper = (cfg.csv_lower, cfg.csv_upper) if cfg.dataset == "csv" else (0.0, 255.0)
    ds = load_csv_dataset(spec, {"width": cfg.input_dim, "lower": lower, "upper": upper})
    if len(ds) == 0:
        raise CliError(f"dataset {spec} has no rows")
    return train_test_split(ds, cfg.test_fraction, cfg.seed_data)


def _print_csv(text: str):
    sys.stdout.write(text)
    sys.stdout.flush()


def _figure(fn, *args):
    # figures are a convenience; a plotting failure should not fail the command
    try:
        from . import report
        getattr(report, fn)(*args)
    except Exception as exc:  # pragma: no cover - depends on the local matplotlib
        log.warning("could not render %s: %s", args[-1], exc)


# --------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    over = {}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.out is not None:
        over["output_dir"] = args.out
    if over:
        cfg = replace(cfg, **over)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if not cfg.output_dir:
        cfg = replace(cfg, output_dir=os.path.join("runs", cfg.name))
    result = train(cfg)
    _figure("training_curve", result.log, os.path.join(cfg.output_dir, "training_curve.png"))
    _print_csv(result.log.metrics_csv())
    return 0


def _report_out(report: EvalReport, stem: str | None):
    if stem:
        report.write(stem)
        _figure("accuracy_bars", report, stem + ".png")
    _print_csv(report.to_csv())


def cmd_linear_eval(args) -> int:
    params, cfg, _ = _load_model(args.checkpoint)
    tr, te = _datasets(args.dataset, cfg)
    report = standard_report(params, cfg, tr, te, robust=args.robust)
    _report_out(report, args.out)
    return 0


def cmd_attack_eval(args) -> int:
    params, cfg, _ = _load_model(args.checkpoint)
    tr, te = _datasets(args.dataset, cfg)
    targeted = args.targeted is not None
    if targeted and not 0 <= args.targeted < (te.num_classes or 0):
        raise CliError(f"target class {args.targeted} outside 0..{te.num_classes - 1}")
    probe = fit_probe(params, cfg, tr, robust=args.robust)
    atk = eval_attack(cfg, args.norm, args.eps, args.method, targeted, args.targeted)
    if args.steps is not None:
        atk = replace(atk, steps=args.steps, step_size=2.5 * args.eps / args.steps
                      if args.eps > 0 else atk.step_size)
    clean = evaluate(params, probe, te)
    entry = evaluate(params, probe, te, atk, args.method, cfg.seed_attack)
    report = EvalReport(clean.accuracy, [entry], len(te), {"attack": cfg.seed_attack},
                        {"protocol": "rLE" if args.robust else "LE", "run": cfg.name})
    _report_out(report, args.out)
    return 0


def cmd_blackbox_eval(args) -> int:
    sp, scfg, _ = _load_model(args.source)
    tp, tcfg, _ = _load_model(args.target)
    if sp.input_dim != tp.input_dim:
        raise CliError(f"input widths differ: {sp.input_dim} vs {tp.input_dim}")
    tr, te = _datasets(args.dataset, tcfg)
    sprobe = fit_probe(sp, scfg, tr, robust=args.robust)
    tprobe = fit_probe(tp, tcfg, tr, robust=args.robust)
    atk = eval_attack(tcfg, args.norm, args.eps, args.method)
    clean = evaluate(tp, tprobe, te)
    white = evaluate(tp, tprobe, te, atk, args.method, tcfg.seed_attack)
    black = black_box_eval((sp, sprobe), (tp, tprobe), te, atk, args.method, tcfg.seed_attack)
    black = replace(black, method=f"{args.method}-transfer")
    report = EvalReport(clean.accuracy, [white, black], len(te), {"attack": tcfg.seed_attack},
                        {"source": args.source, "target": args.target})
    _report_out(report, args.out)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    try:
        values = [parse_number(v) for v in args.values.split(",") if v.strip()]
    except (ValueError, ConfigError) as exc:
        raise CliError(f"bad --values: {exc}") from None
    if not values:
        raise CliError("--values lists no values")
    if args.axis in ("K", "epochs"):
        values = [int(v) for v in values]
    rows = run_ablation(cfg, args.axis, values, robust=args.robust)
    text = ablation_csv(rows, cfg.eval_budgets())
    if args.out:
        from .encoder import atomic_write_bytes

        os.makedirs(args.out, exist_ok=True)
        atomic_write_bytes(os.path.join(args.out, f"ablation_{args.axis}.csv"), text.encode())
        _figure("ablation_plot", rows, cfg.eval_budgets(),
                os.path.join(args.out, f"ablation_{args.axis}.png"))
    _print_csv(text)
    return 0 if any(r.status == "ok" for r in rows) else 1


def cmd_export_embeddings(args) -> int:
    params, cfg, _ = _load_model(args.checkpoint)
    tr, te = _datasets(args.dataset, cfg)
    ds = te if len(te) else tr
    coords = export_embeddings_2d(params, ds, args.out, which=args.which)
    _figure("embedding_scatter", coords, ds.labels, os.path.splitext(args.out)[0] + ".png")
    sys.stdout.write(f"wrote {len(coords)} points to {args.out}\n")
    return 0


# ----------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _budget(text: str) -> float:
    try:
        v = parse_number(text)
    except (ValueError, ConfigError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swaro", description="Cluster-guided adversarial contrastive learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="pretrain an encoder from a config file or preset:NAME")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: config output_dir or runs/NAME)")
    s.add_argument("--epochs", type=_positive_int)
    s.add_argument("--seed", type=int, help="set every seed stream to this value")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("linear-eval", help="fit a linear probe and report clean/PGD accuracy")
    s.add_argument("checkpoint")
    s.add_argument("dataset", help="CSV path, or 'config' to rebuild the pretraining data")
    s.add_argument("--robust", action="store_true", help="train the probe on PGD examples")
    s.add_argument("--out", help="write STEM.csv, STEM.json and STEM.png")
    s.set_defaults(fn=cmd_linear_eval)

    s = sub.add_parser("attack-eval", help="accuracy under a single attack")
    s.add_argument("checkpoint")
    s.add_argument("--dataset", default="config")
    s.add_argument("--method", choices=METHODS, default="PGD")
    s.add_argument("--norm", choices=NORMS, default="linf")
    s.add_argument("--eps", type=_budget, required=True, help="budget, e.g. 8/255")
    s.add_argument("--steps", type=_positive_int)
    s.add_argument("--targeted", type=int, metavar="C", help="steer every input toward class C")
    s.add_argument("--robust", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_attack_eval)

    s = sub.add_parser("blackbox-eval", help="transfer attack crafted on SRC against DST")
    s.add_argument("source")
    s.add_argument("target")
    s.add_argument("--dataset", default="config")
    s.add_argument("--method", choices=METHODS, default="PGD")
    s.add_argument("--norm", choices=NORMS, default="linf")
    s.add_argument("--eps", type=_budget, default=8 / 255)
    s.add_argument("--robust", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_blackbox_eval)

    s = sub.add_parser("ablate", help="sweep p, K or epochs")
    s.add_argument("config")
    s.add_argument("--axis", choices=AXES, required=True)
    s.add_argument("--values", required=True, help="comma separated, e.g. 0.1,0.5,0.9")
    s.add_argument("--epochs", type=_positive_int, help="override the base epoch count")
    s.add_argument("--robust", action="store_true")
    s.add_argument("--out", help="directory for ablation_AXIS.csv and .png")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("export-embeddings", help="2-D PCA of embeddings as x,y,label CSV")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--which", choices=("representation", "embedding"), default="representation")
    s.set_defaults(fn=cmd_export_embeddings)
    return p


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliError, ConfigError, FileNotFoundError, CheckpointError, TrainingError,
            ValueError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"swaro {args.command}: error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
