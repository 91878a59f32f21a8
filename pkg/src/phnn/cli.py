"""``phnn`` command-line entry point.

Every command prints comma-delimited results on stdout; with ``--out`` it also
writes CSV/JSON artifacts and matplotlib figures into that directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex
from .data import SyntheticSedParams
from .errors import PHNNError
from .report import emit_report, plot_bars
from .train import MetricsReport


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _words(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


# ---------------------------------------------------------------- commands

def _toy(args, pure: bool) -> int:
    seeds = list(range(args.seeds)) if args.seeds else [args.seed if args.seed is not None else 0]
    overrides = {k: v for k, v in (("lr", args.lr), ("momentum", args.momentum),
                                   ("batch_size", args.batch_size)) if v is not None}
    runner = ex.cmd_toy_pure if pure else ex.cmd_toy_quaternion
    tol = args.tolerance if args.tolerance is not None else (1e-3 if pure else 1e-4)
    reports = [runner(seed=s, steps=args.steps, tolerance=tol, **overrides) for s in seeds]
    w = _writer()
    w.writerow(["seed", "final_loss", "h_rel_error", "converged", "term_energy"])
    for r in reports:
        w.writerow([r.seed, _fmt(r.final_loss), _fmt(r.h_rel_error), int(r.converged),
                    " ".join(f"{e:.4f}" for e in r.term_energy)])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "toy.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
        curves = {f"seed{r.seed}": MetricsReport(task="regress", loss_curve=list(enumerate(r.loss_curve)))
                  for r in reports}
        emit_report(curves, "csv", out, stem="toy")
        emit_report(curves, "svg", out, stem="toy_loss")
    passed = sum(r.converged for r in reports)
    print(f"# converged {passed}/{len(reports)}", file=sys.stderr)
    return 0


def cmd_toy_quaternion(args) -> int:
    return _toy(args, pure=False)


def cmd_toy_pure(args) -> int:
    return _toy(args, pure=True)


def cmd_param_audit(args) -> int:
    families = _words(args.family) if args.family else ["phvgg", "phresnet"]
    n_values = _ints(args.n) if args.n else [1, 2, 3, 4]
    out_csv = Path(args.out) / "param_audit.csv" if args.out else None
    rows = ex.cmd_param_audit(families, args.widths, n_values, args.depths, out_csv)
    w = _writer()
    w.writerow(ex.AUDIT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in ex.AUDIT_COLUMNS])
    if args.out:
        for fam in families:
            sel = [r for r in rows if r.family == fam]
            plot_bars([r.n for r in sel], [r.ratio for r in sel], f"{fam} parameter ratio",
                      Path(args.out) / f"param_ratio_{fam}.svg")
    return 0


def cmd_gradcheck(args) -> int:
    results, code = ex.cmd_gradcheck(args.scope, args.seed if args.seed is not None else 0)
    w = _writer()
    w.writerow(["scope", "check", "max_rel_error", "tolerance", "status"])
    for r in results:
        w.writerow([r.scope, r.name, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}", "pass" if r.passed else "FAIL"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"# failed: {', '.join(failed)}", file=sys.stderr)
    return code


def resolve_run_config(args) -> tuple:
    """Config file first, then any explicitly given flag on top of it."""
    base = ex.RunConfig.load(args.config).to_dict() if args.config else {}
    n_values = _ints(args.n) if args.n else [base.get("n", 1)]
    for key in ("task", "family", "channel_policy", "seed", "algebra_mode"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if args.epochs is not None:
        base["train"] = {**base.get("train", {}), "epochs": args.epochs}
    if args.lr is not None:
        base["train"] = {**base.get("train", {}), "lr0": args.lr}
    if args.task is None and "task" not in base:
        base["task"] = "classify"
    if "family" not in base:
        base["family"] = "phresnet" if base["task"] == "classify" else "phsed"
    base["n"] = n_values[0]
    return ex.RunConfig.from_dict(base), n_values


def cmd_train(args) -> int:
    cfg, n_values = resolve_run_config(args)
    out = Path(args.out) if args.out else (Path(cfg.out_dir) if cfg.out_dir else None)
    outcomes = ex.cmd_compare(cfg, n_values, out)
    w = _writer()
    w.writerow(ex.COMPARISON_COLUMNS)
    for row in ex.comparison_rows(outcomes):
        w.writerow(["" if row[c] is None else _fmt(row[c]) for c in ex.COMPARISON_COLUMNS])
    if out is not None:
        results = {f"n{o.config.n}": o.result for o in outcomes}
        emit_report(results, "svg", out, stem="loss_curves")
        emit_report(results, "json", out, stem="metrics")
        if cfg.task == "classify":
            plot_bars(n_values, [o.result.report.accuracy for o in outcomes], "test accuracy",
                      out / "comparison_accuracy.svg")
        else:
            plot_bars(n_values, [o.result.report.sed_score for o in outcomes], "SED score",
                      out / "comparison_sed_score.svg")
    return 0


def cmd_generate_sed(args) -> int:
    params = json.loads(Path(args.config).read_text()) if args.config else {}
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    for key in ("channels", "num_clips", "num_classes", "frames", "mel_bins", "max_overlap"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if args.phase:
        params["phase"] = True
    p = SyntheticSedParams(**params)
    p.validate()
    out = Path(args.out or "synthetic_sed.npz")
    ex.cmd_generate_sed(p, args.seed if args.seed is not None else 0, out)
    w = _writer()
    w.writerow(["path", "clips", "channels", "frames", "mel_bins", "classes"])
    w.writerow([out, p.num_clips, p.channels, p.frames, p.mel_bins, p.num_classes])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phnn", description="Parameterized hypercomplex layers: "
                                     "toy tasks, audits, gradient checks and training runs.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("toy-quaternion", cmd_toy_quaternion, "recover a quaternion-structured weight"),
                            ("toy-pure", cmd_toy_pure, "recover a pure-quaternion weight")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", type=int, help="run seeds 0..N-1 instead of a single --seed")
        p.add_argument("--steps", type=int, default=2000)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--tolerance", type=float)
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("param-audit", help="exact parameter counts and checkpoint sizes per (family, n)")
    p.add_argument("--family", help="comma list of phvgg, phresnet, phsed")
    p.add_argument("--n", help="comma list of n values")
    p.add_argument("--widths", type=_ints, help="override stage widths")
    p.add_argument("--depths", type=_ints, help="override blocks per stage")
    p.add_argument("--out")
    p.set_defaults(func=cmd_param_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("ops", "layers", "models", "all"), default="all")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="classification or SED run; several --n values give a comparison")
    p.add_argument("--task", choices=("classify", "sed"))
    p.add_argument("--n", help="n or comma list of n values")
    p.add_argument("--family", choices=("phvgg", "phresnet", "phsed"))
    p.add_argument("--channel-policy", dest="channel_policy", choices=("natural", "zero_pad_to_n"))
    p.add_argument("--algebra", dest="algebra_mode", help="learnable or a preset family name")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate-sed", help="write a synthetic multichannel SED set to .npz")
    p.add_argument("--channels", type=int)
    p.add_argument("--num-clips", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--mel-bins", type=int)
    p.add_argument("--max-overlap", type=int)
    p.add_argument("--phase", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON generator parameters")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate_sed)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PHNNError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
