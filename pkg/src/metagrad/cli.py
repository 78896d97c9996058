"""Command-line surface: argv parsing, dispatch, and exit-code mapping.

All real work lives in `experiments`; this module turns arguments into
calls and errors into exit codes (0 success, 1 verification failure,
2 usage/config error). METAGRAD_SEED overrides the configured seed(s)
for every command that consumes randomness.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import experiments as ex
from .engine import TaskConfig
from .errors import MetagradError
from .tasks import KINDS as TASK_KINDS

DEFAULT_SIGMAS = (0.0, 0.5, 1.0, 2.0, 4.0)


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit on bad usage."""

    def error(self, message):
        raise MetagradError(message)


def build_parser():
    parser = _Parser(prog="metagrad",
                     description="Meta-learning optimization laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_eval_args(p, tasks_default=None):
        p.add_argument("--tasks", type=int, default=tasks_default,
                       help="number of meta-test tasks (default: config)")
        p.add_argument("--seed", type=int, default=None,
                       help="meta-test episode seed (default: METAGRAD_SEED or 0)")
        p.add_argument("--workers", type=int, default=1,
                       help="evaluation worker processes")
        p.add_argument("--config", help="TOML overriding the checkpoint's config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.add_argument("--out", help="output directory (default: checkpoint's)")

    p = sub.add_parser("train", help="meta-train per seed and write artifacts")
    p.add_argument("--config", help="experiment TOML file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="output directory (default: output_dir/name)")

    p = sub.add_parser("ablate", help="freeze-only / adapt-only layer sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", action="append", default=[],
                   help="layer to ablate, repeatable (default: all)")
    p.add_argument("--mode", choices=("both",) + ex.ABLATE_MODES, default="both")
    add_eval_args(p)

    p = sub.add_parser("perturb", help="noise-vs-accuracy sweep on one layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--sigma", type=float, nargs="+", default=list(DEFAULT_SIGMAS))
    p.add_argument("--repeats", type=int, default=3)
    add_eval_args(p)

    p = sub.add_parser("collapse", help="paired original-vs-collapsed evaluation")
    p.add_argument("--checkpoint", required=True)
    add_eval_args(p)

    p = sub.add_parser("landscape", help="loss grid and stationary-point report")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--extent", type=float, nargs=2, default=(-4.0, 4.0),
                   metavar=("LO", "HI"))
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--trajectory", action="append", default=[],
                   help="trajectory CSV from cmd_train to overlay, repeatable")
    p.add_argument("--out", default="landscape")

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--json", dest="json_path",
                   help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("export", help="dump checkpoint weights or task samples")
    ex_sub = p.add_subparsers(dest="what", required=True)
    pw = ex_sub.add_parser("weights", help="checkpoint parameters as CSV")
    pw.add_argument("--checkpoint", required=True)
    pw.add_argument("--out", default="weights.csv")
    pt = ex_sub.add_parser("tasks", help="meta-test episodes as CSV files")
    pt.add_argument("--kind", choices=TASK_KINDS, default="logistic2d")
    pt.add_argument("--shots", type=int, default=5)
    pt.add_argument("--query", type=int, default=20)
    pt.add_argument("--ways", type=int, default=2)
    pt.add_argument("--dim", type=int, default=2)
    pt.add_argument("--noiseless", action="store_true")
    pt.add_argument("--n", type=int, default=1)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--out", default="tasks")
    return parser


def _resolve_seed(value):
    if value is not None:
        return value
    env = os.environ.get("METAGRAD_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise MetagradError(
                f"METAGRAD_SEED must be an integer, got {env!r}") from None
    return 0


def _eval_context(args):
    """(model, xi, config, seed, outdir) shared by the checkpoint commands."""
    model, xi, cfg = ex.load_run_context(args.checkpoint)
    doc = cfg.to_dict()
    if args.config:
        file_cfg = ex.ExperimentConfig.from_toml(args.config)
        _deep_merge(doc, file_cfg.to_dict())
    ex.apply_overrides(doc, args.set)
    cfg = ex.ExperimentConfig.from_dict(doc)
    outdir = Path(args.out) if args.out else Path(args.checkpoint).parent
    outdir.mkdir(parents=True, exist_ok=True)
    return model, xi, cfg, _resolve_seed(args.seed), outdir


def _deep_merge(base, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value


def _fmt(value, digits=4):
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def _print_table(headers, rows):
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())


def _metric_row(run_id, seed, step, evd, ablation):
    return {
        "run_id": run_id, "seed": seed, "iteration": 0, "phase": "meta-test",
        "step": step, "loss": evd.get("loss"), "accuracy": evd.get("accuracy"),
        "ablation": ablation, "wall_ms": "",
    }


def _do_train(args):
    cfg = ex.load_config(args.config, overrides=args.set)
    summary, outdir = ex.cmd_train(cfg, outdir=args.out)
    print(f"run {cfg.name}: artifacts in {outdir}")
    _print_table(
        ["seed", "loss", "accuracy", "mse", "diverged"],
        [(r["seed"], _fmt(r["loss"]), _fmt(r["accuracy"]), _fmt(r["mse"], 6),
          r["diverged"]) for r in summary["per_seed"]],
    )
    agg = summary["over_seeds"]
    print(f"over seeds: loss {_fmt(agg['loss']['mean'])}"
          f" +/- {_fmt(agg['loss']['std'])}"
          f", accuracy {_fmt(agg['accuracy']['mean'])}"
          f" +/- {_fmt(agg['accuracy']['std'])}")
    if summary["diverged"]:
        print("warning: at least one seed diverged (see summary.json)")
    return 0


def _do_ablate(args):
    model, xi, cfg, seed, outdir = _eval_context(args)
    modes = ex.ABLATE_MODES if args.mode == "both" else (args.mode,)
    report = ex.cmd_ablate(model, xi, cfg, layers=args.layer or None,
                           modes=modes, n_tasks=args.tasks, seed=seed,
                           workers=args.workers)
    run_id = Path(args.checkpoint).stem
    step = cfg.eval_inner().steps
    rows = [_metric_row(run_id, seed, step, report["full"], "none")]
    rows += [_metric_row(run_id, seed, step, r, f"{r['mode']}:{r['layer']}")
             for r in report["rows"]]
    ex.write_metrics(outdir / "metrics.csv", rows)
    with open(outdir / "ablate.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"full adaptation: accuracy {_fmt(report['full']['accuracy'])} "
          f"({report['n_tasks']} tasks, seed {seed})")
    _print_table(
        ["layer", "mode", "accuracy", "task std", "loss"],
        [(r["layer"], r["mode"], _fmt(r["accuracy"]),
          _fmt(r.get("accuracy_std")), _fmt(r["loss"])) for r in report["rows"]],
    )
    if report["critical_layers"]:
        print("critical layers (adapt-only ~ full, freeze-only far below): "
              + ", ".join(report["critical_layers"]))
    return 0


def _do_perturb(args):
    model, xi, cfg, seed, outdir = _eval_context(args)
    report = ex.cmd_perturb(model, xi, cfg, args.layer, args.sigma,
                            repeats=args.repeats, n_tasks=args.tasks,
                            seed=seed, workers=args.workers)
    run_id = Path(args.checkpoint).stem
    step = cfg.eval_inner().steps
    rows = [_metric_row(run_id, seed, step, r,
                        f"perturb:{args.layer}:sigma={r['sigma']}")
            for r in report["rows"]]
    ex.write_metrics(outdir / "metrics.csv", rows)
    with open(outdir / "perturb.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"perturbing {args.layer} ({report['n_tasks']} tasks, seed {seed}, "
          f"{args.repeats} draws per sigma)")
    _print_table(
        ["sigma", "accuracy", "draw std", "loss"],
        [(r["sigma"], _fmt(r["accuracy"]), _fmt(r.get("accuracy_std")),
          _fmt(r["loss"])) for r in report["rows"]],
    )
    return 0


def _do_collapse(args):
    model, xi, cfg, seed, outdir = _eval_context(args)
    report = ex.cmd_collapse(model, xi, cfg, n_tasks=args.tasks, seed=seed,
                             workers=args.workers)
    run_id = Path(args.checkpoint).stem
    step = cfg.eval_inner().steps
    ex.write_metrics(outdir / "metrics.csv", [
        _metric_row(run_id, seed, step, report["original"], "original"),
        _metric_row(run_id, seed, step, report["collapsed"], "collapsed"),
    ])
    with open(outdir / "collapse.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _print_table(
        ["model", "accuracy", "task std", "loss"],
        [("original", _fmt(report["original"]["accuracy"]),
          _fmt(report["original"].get("accuracy_std")),
          _fmt(report["original"]["loss"])),
         ("collapsed", _fmt(report["collapsed"]["accuracy"]),
          _fmt(report["collapsed"].get("accuracy_std")),
          _fmt(report["collapsed"]["loss"]))],
    )
    print(f"accuracy gap: {_fmt(report['accuracy_gap'])}, pre-adaptation "
          f"forward max |diff|: {report['forward_max_abs_diff']:.3e}")
    return 0


def _do_landscape(args):
    rows, report = ex.cmd_landscape(args.alpha, tuple(args.extent),
                                    args.resolution)
    ex.write_landscape(args.out, rows, report, trajectories=args.trajectory)
    print(f"wrote {len(rows)} grid points to {args.out}/landscape.csv")
    _print_table(
        ["a", "b", "kind", "loss", "|grad|"],
        [(f"{p['a']:+.5f}", f"{p['b']:+.5f}", p["kind"], _fmt(p["loss"], 6),
          f"{p['gradient_norm']:.2e}") for p in report["stationary_points"]],
    )
    return 0


def _do_verify(args):
    report = ex.cmd_verify(seed=_resolve_seed(args.seed))
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.json_path:
        with open(args.json_path, "w") as fh:
            fh.write(text)
        for suite in report["suites"]:
            status = "PASS" if suite["passed"] else "FAIL"
            print(f"{suite['name']}: {status} ({suite['wall_ms']:.0f} ms)")
    else:
        sys.stdout.write(text)
    if not report["passed"]:
        print(f"verification failed: {report['first_failure']}", file=sys.stderr)
        return 1
    return 0


def _do_export(args):
    if args.what == "weights":
        path = ex.cmd_export_weights(args.checkpoint, args.out)
        print(f"wrote {path}")
        return 0
    task_cfg = TaskConfig(kind=args.kind, shots=args.shots, query=args.query,
                          ways=args.ways, dim=args.dim,
                          noiseless=args.noiseless)
    paths = ex.cmd_export_tasks(task_cfg, args.n, _resolve_seed(args.seed),
                                args.out)
    print(f"wrote {len(paths)} episode files to {args.out}")
    return 0


_DISPATCH = {
    "train": _do_train,
    "ablate": _do_ablate,
    "perturb": _do_perturb,
    "collapse": _do_collapse,
    "landscape": _do_landscape,
    "verify": _do_verify,
    "export": _do_export,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except SystemExit as err:  # argparse --help
        return int(err.code or 0)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MetagradError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
