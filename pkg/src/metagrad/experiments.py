"""Experiment harness behind the CLI: configs, runners, artifact writers.

The CLI layer only parses argv and maps errors to exit codes; everything
here is importable and testable without a terminal. Artifacts (metrics
CSV, summary JSON, checkpoints, landscape grids, verification reports)
are pure functions of (config, seeds): re-running a manifest reproduces
them bit-comparably.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from . import autodiff as ad
from .engine import (
    InnerConfig,
    OuterConfig,
    TaskConfig,
    TrainConfig,
    adapt,
    eval_episodes,
    evaluate,
    meta_step,
    meta_train,
)
from .errors import ConfigurationError
from .models import ModelSpec, build_model, collapse_linear, forward, set_freeze
from .optimizers import OptimizerSpec, init_xi, kron_dense
from .oracle import (
    deep_maml_grad,
    deep_maml_loss,
    deep_one_step_adapt,
    landscape_grid,
    mc_landscape,
    stationary_points,
)
from .rng import STREAM_INIT, STREAM_TASK, stream_rng
from .serialize import load_checkpoint, save_checkpoint
from .tasks import dump_csv

SCHEMA_VERSION = 1

METRIC_FIELDS = (
    "run_id", "seed", "iteration", "phase", "step",
    "loss", "accuracy", "ablation", "wall_ms",
)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One reproducible experiment: everything but the artifacts.

    Mirrors TrainConfig plus run plumbing (name, seed list, output
    directory). The TOML file format uses the same section names as the
    nested to_dict() layout.
    """

    name: str = "run"
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    task: TaskConfig = field(default_factory=TaskConfig)
    inner: InnerConfig = field(default_factory=lambda: InnerConfig(alpha=0.1))
    outer: OuterConfig = field(default_factory=lambda: OuterConfig(beta=0.01))
    seeds: tuple = (0,)
    eval_tasks: int = 100
    eval_every: int = 0
    eval_steps: int = None
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.seeds, int):
            self.seeds = (self.seeds,)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if self.eval_tasks < 0:
            raise ConfigurationError("eval_tasks must be >= 0")

    def to_dict(self):
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "task": self.task.to_dict(),
            "inner": self.inner.to_dict(),
            "outer": self.outer.to_dict(),
            "seeds": list(self.seeds),
            "eval_tasks": self.eval_tasks,
            "eval_every": self.eval_every,
            "eval_steps": self.eval_steps,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        base = cls()
        known = set(base.to_dict())
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(
                f"unknown config keys {sorted(unknown)}; valid: {sorted(known)}"
            )
        sections = {
            "model": (ModelSpec, base.model),
            "optimizer": (OptimizerSpec, base.optimizer),
            "task": (TaskConfig, base.task),
            "inner": (InnerConfig, base.inner),
            "outer": (OuterConfig, base.outer),
        }
        kwargs = {}
        for key, (maker, default) in sections.items():
            merged = default.to_dict()
            user = doc.pop(key, {})
            if not isinstance(user, dict):
                raise ConfigurationError(f"[{key}] must be a table")
            bad = set(user) - set(merged)
            if bad:
                raise ConfigurationError(
                    f"unknown keys {sorted(bad)} in [{key}]; "
                    f"valid: {sorted(merged)}"
                )
            merged.update(user)
            try:
                kwargs[key] = maker(**merged)
            except TypeError as err:
                raise ConfigurationError(f"bad [{key}] section: {err}") from None
        kwargs.update(doc)
        return cls(**kwargs)

    @classmethod
    def from_toml(cls, path, overrides=()):
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as err:
            raise ConfigurationError(f"invalid TOML in {path}: {err}") from None
        apply_overrides(doc, overrides)
        return cls.from_dict(doc)

    def train_config(self):
        return TrainConfig(
            model=self.model, inner=self.inner, outer=self.outer,
            task=self.task, optimizer=self.optimizer,
            eval_every=self.eval_every, eval_tasks=self.eval_tasks,
            eval_steps=self.eval_steps,
        )

    def eval_inner(self):
        steps = self.eval_steps if self.eval_steps is not None else self.inner.steps
        return InnerConfig(self.inner.alpha, steps, self.inner.first_order)


def parse_override(pair):
    """Split one `--set section.key=value` into (path list, value).

    The value is parsed as a TOML literal (so `0.5`, `true`, `[0, 1]`
    work); anything that does not parse is kept as a bare string.
    """
    key, sep, raw = pair.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(f"override must look like key=value, got {pair!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return [part.strip() for part in key.split(".")], value


def apply_overrides(doc, pairs):
    """Apply `--set` pairs onto a raw (nested dict) config in place."""
    for pair in pairs:
        path, value = parse_override(pair)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(
                    f"cannot set {'.'.join(path)}: {part} is not a table"
                )
        node[path[-1]] = value
    return doc


def load_config(path=None, overrides=(), seed_env=None):
    """Config from an optional TOML file, overrides, and METAGRAD_SEED.

    The environment variable (passed in already read, or taken from
    os.environ when None) overrides the seed list entirely.
    """
    if path is not None:
        cfg_doc = ExperimentConfig.from_toml(path, overrides).to_dict()
    else:
        cfg_doc = apply_overrides({}, overrides)
    if seed_env is None:
        seed_env = os.environ.get("METAGRAD_SEED")
    if seed_env not in (None, ""):
        try:
            cfg_doc["seeds"] = [int(seed_env)]
        except ValueError:
            raise ConfigurationError(
                f"METAGRAD_SEED must be an integer, got {seed_env!r}"
            ) from None
    return ExperimentConfig.from_dict(cfg_doc)


# ---------------------------------------------------------------------------
# artifact writers


def git_describe():
    """`git describe` of the source tree, or "unknown" outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def run_manifest(cfg):
    """Everything needed to re-run the experiment bit-comparably."""
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "git_describe": git_describe(),
        "seeds": list(cfg.seeds),
        "config": cfg.to_dict(),
        "metric_fields": list(METRIC_FIELDS),
    }


def write_metrics(path, rows):
    """Append-only metrics CSV with the frozen METRIC_FIELDS schema."""
    exists = Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        if not exists:
            w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k, ""))
                        for k in METRIC_FIELDS})


def metric_rows(run_id, seed, record, ablation=""):
    """Map one ExperimentRecord's engine metrics to MetricRow dicts."""
    rows = []
    for m in record.metrics:
        rows.append({
            "run_id": run_id, "seed": seed, "iteration": m["iteration"],
            "phase": m["phase"], "step": m["step"], "loss": m["loss"],
            "accuracy": m.get("accuracy"), "ablation": ablation,
            "wall_ms": round(m["wall_ms"], 3),
        })
    return rows


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _mean_std(values):
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}


# ---------------------------------------------------------------------------
# evaluation helpers (shared by ablate / perturb / collapse)


def _eval_chunk(args):
    model, xi, episodes, inner = args
    return evaluate(model, xi, episodes, inner)


def run_eval(model, xi, episodes, inner, workers=1):
    """evaluate(), optionally fanned out over a process worker pool.

    Chunks are merged back in submission order, so the per-task lists
    and the means are identical for every worker count.
    """
    if workers <= 1 or len(episodes) < 2 * workers:
        return evaluate(model, xi, episodes, inner)
    chunk = math.ceil(len(episodes) / workers)
    parts = [episodes[i: i + chunk] for i in range(0, len(episodes), chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_eval_chunk, [(model, xi, p, inner) for p in parts]))
    merged = {"per_task_loss": [], "per_task_accuracy": [], "per_task_mse": []}
    for res in results:
        for key in merged:
            if res[key] is not None:
                merged[key] += res[key]
    out = {key: (vals or None) for key, vals in merged.items()}
    out["loss"] = float(np.mean(out["per_task_loss"]))
    for key, per in (("accuracy", "per_task_accuracy"), ("mse", "per_task_mse")):
        out[key] = float(np.mean(out[per])) if out[per] else None
    return out


def _layer_names(model):
    return [layer.name for layer in model.layers]


def _require_layers(model, layers):
    valid = _layer_names(model)
    for name in layers:
        if name not in valid:
            raise ConfigurationError(
                f"unknown layer {name!r}; valid layers: {', '.join(valid)}"
            )


def _eval_summary(ev):
    out = {"loss": ev["loss"], "accuracy": ev["accuracy"], "mse": ev["mse"]}
    if ev["per_task_accuracy"]:
        out["accuracy_std"] = float(np.std(ev["per_task_accuracy"], ddof=0))
    if ev["per_task_mse"]:
        out["mse_std"] = float(np.std(ev["per_task_mse"], ddof=0))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, outdir=None):
    """Run meta_train per seed; write metrics, checkpoints, summary.

    Divergence is recorded in the summary (flag plus step), not raised:
    a diverged run is a result, not a usage error.
    """
    outdir = Path(outdir) if outdir is not None else Path(cfg.output_dir) / cfg.name
    outdir.mkdir(parents=True, exist_ok=True)
    per_seed = []
    pooled_acc, pooled_loss, pooled_mse = [], [], []
    all_rows = []
    for seed in cfg.seeds:
        record = meta_train(cfg.train_config(), seed)
        all_rows += metric_rows(cfg.name, seed, record)
        save_checkpoint(
            outdir / f"checkpoint_seed{seed}.json",
            record.final_model, xi=record.final_xi,
            meta={"config": cfg.to_dict(), "seed": seed},
        )
        if record.trajectory:
            _write_trajectory(outdir / f"trajectory_seed{seed}.csv", record.trajectory)
        ev = record.final_eval or {}
        per_seed.append({
            "seed": seed,
            "loss": ev.get("loss"),
            "accuracy": ev.get("accuracy"),
            "mse": ev.get("mse"),
            "diverged": record.diverged,
            "divergence_step": record.divergence_step,
            "wall_ms": round(record.wall_ms, 3),
        })
        pooled_loss += ev.get("per_task_loss") or []
        pooled_acc += ev.get("per_task_accuracy") or []
        pooled_mse += ev.get("per_task_mse") or []
    write_metrics(outdir / "metrics.csv", all_rows)
    summary = {
        "manifest": run_manifest(cfg),
        "per_seed": per_seed,
        "over_seeds": {
            "loss": _mean_std([r["loss"] for r in per_seed]),
            "accuracy": _mean_std([r["accuracy"] for r in per_seed]),
            "mse": _mean_std([r["mse"] for r in per_seed]),
        },
        "over_tasks": {
            "n": len(pooled_loss),
            "loss": _mean_std(pooled_loss),
            "accuracy": _mean_std(pooled_acc),
            "mse": _mean_std(pooled_mse),
        },
        "diverged": any(r["diverged"] for r in per_seed),
    }
    _write_json(outdir / "summary.json", summary)
    return summary, outdir


def _write_trajectory(path, trajectory):
    keys = sorted(trajectory[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + keys)
        for it, point in enumerate(trajectory):
            w.writerow([it] + [repr(point[k]) for k in keys])


def load_run_context(checkpoint):
    """(model, xi, ExperimentConfig) from a checkpoint written by cmd_train.

    Checkpoints carry their training config in the meta block; ad-hoc
    checkpoints without one fall back to the config defaults.
    """
    model, xi, meta = load_checkpoint(checkpoint)
    doc = meta.get("config") or {}
    return model, xi, ExperimentConfig.from_dict(doc)


ABLATE_MODES = ("freeze-only", "adapt-only")


def cmd_ablate(model, xi, cfg, layers=None, modes=ABLATE_MODES,
               n_tasks=None, seed=0, workers=1):
    """Per-layer freeze-only / adapt-only post-adaptation accuracies.

    freeze-only masks the named layer and adapts the rest; adapt-only
    adapts the named layer and masks the rest. Every row is evaluated
    on the same meta-test episodes as the full-adaptation baseline.
    The report flags layers that are critical in the paired sense:
    adapt-only within 3 points of full while freeze-only sits at least
    10 points below full.
    """
    layers = list(layers) if layers else _layer_names(model)
    _require_layers(model, layers)
    for mode in modes:
        if mode not in ABLATE_MODES:
            raise ConfigurationError(
                f"unknown mode {mode!r}; valid modes: {', '.join(ABLATE_MODES)}"
            )
    n_tasks = n_tasks if n_tasks is not None else cfg.eval_tasks
    inner = cfg.eval_inner()
    episodes = eval_episodes(cfg.task, n_tasks, seed)
    full = run_eval(model, xi, episodes, inner, workers=workers)
    names = _layer_names(model)
    rows = []
    by_layer = {}
    for layer in layers:
        entry = by_layer.setdefault(layer, {})
        for mode in modes:
            if mode == "freeze-only":
                mask = [name == layer for name in names]
            else:
                mask = [name != layer for name in names]
            ev = run_eval(set_freeze(model, mask), xi, episodes, inner,
                          workers=workers)
            row = {"layer": layer, "mode": mode, **_eval_summary(ev)}
            rows.append(row)
            entry[mode] = ev["accuracy"]
    critical = []
    if set(modes) == set(ABLATE_MODES) and full["accuracy"] is not None:
        for layer in layers:
            entry = by_layer[layer]
            if (entry["adapt-only"] >= full["accuracy"] - 0.03
                    and entry["freeze-only"] <= full["accuracy"] - 0.10):
                critical.append(layer)
    return {
        "n_tasks": n_tasks,
        "seed": seed,
        "full": _eval_summary(full),
        "rows": rows,
        "critical_layers": critical,
    }


def cmd_perturb(model, xi, cfg, layer, sigmas, repeats=3,
                n_tasks=None, seed=0, workers=1):
    """Accuracy sweep after Gaussian noise on one layer, pre-adaptation.

    Noise std is sigma times the std of the layer's entries (sigma
    itself when that std is zero), drawn `repeats` times per sigma;
    sigma = 0 short-circuits to the unperturbed evaluation. Adaptation
    stays enabled for all layers.
    """
    _require_layers(model, [layer])
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ConfigurationError(f"sigma must be >= 0, got {min(sigmas)}")
    n_tasks = n_tasks if n_tasks is not None else cfg.eval_tasks
    inner = cfg.eval_inner()
    episodes = eval_episodes(cfg.task, n_tasks, seed)
    base = run_eval(model, xi, episodes, inner, workers=workers)
    noise_rng = stream_rng(seed, STREAM_INIT, 1)
    rows = []
    for sigma in sigmas:
        if sigma == 0.0:
            rows.append({"sigma": 0.0, "repeats": 1,
                         "accuracy": base["accuracy"],
                         "accuracy_std": 0.0, "loss": base["loss"]})
            continue
        accs, losses = [], []
        for _ in range(repeats):
            ev = run_eval(_perturbed(model, layer, sigma, noise_rng), xi,
                          episodes, inner, workers=workers)
            accs.append(ev["accuracy"])
            losses.append(ev["loss"])
        rows.append({
            "sigma": sigma, "repeats": repeats,
            "accuracy": float(np.mean(accs)),
            "accuracy_std": float(np.std(accs, ddof=0)),
            "loss": float(np.mean(losses)),
        })
    return {
        "layer": layer, "n_tasks": n_tasks, "seed": seed,
        "unperturbed": _eval_summary(base), "rows": rows,
    }


def _perturbed(model, layer_name, sigma, rng):
    out = model.clone()
    for layer in out.layers:
        if layer.name != layer_name:
            continue
        entries = [layer.weight.ravel()]
        if layer.bias is not None:
            entries.append(layer.bias.ravel())
        spread = float(np.std(np.concatenate(entries)))
        scale = sigma * spread if spread > 0 else sigma
        layer.weight = layer.weight + rng.normal(0.0, scale, layer.weight.shape)
        if layer.bias is not None:
            layer.bias = layer.bias + rng.normal(0.0, scale, layer.bias.shape)
    return out


def cmd_collapse(model, xi, cfg, n_tasks=None, seed=0, workers=1):
    """Paired adaptation of a linear model vs its collapsed equivalent.

    Raises ContractError (exit 2 at the CLI) for models that are not a
    pure-linear stack. Both models see identical meta-test episodes;
    forward agreement is checked pre-adaptation on a fresh input batch.
    A learned transform is tied to the original parameter layout and has
    no image under collapse, so the collapsed model adapts with plain
    gradients.
    """
    collapsed = collapse_linear(model)
    n_tasks = n_tasks if n_tasks is not None else cfg.eval_tasks
    inner = cfg.eval_inner()
    episodes = eval_episodes(cfg.task, n_tasks, seed)
    ev_orig = run_eval(model, xi, episodes, inner, workers=workers)
    ev_col = run_eval(collapsed, None, episodes, inner, workers=workers)
    probe = stream_rng(seed, STREAM_TASK, 2).normal(
        size=(64, model.spec.input_dim))
    agree = float(np.max(np.abs(
        forward(model, probe).value - forward(collapsed, probe).value)))
    pairs = []
    if ev_orig["per_task_accuracy"]:
        pairs = [
            {"task": i, "original": o, "collapsed": c}
            for i, (o, c) in enumerate(zip(ev_orig["per_task_accuracy"],
                                           ev_col["per_task_accuracy"]))
        ]
    gap = None
    if ev_orig["accuracy"] is not None:
        gap = ev_orig["accuracy"] - ev_col["accuracy"]
    return {
        "n_tasks": n_tasks, "seed": seed,
        "original": _eval_summary(ev_orig),
        "collapsed": _eval_summary(ev_col),
        "accuracy_gap": gap,
        "forward_max_abs_diff": agree,
        "paired": pairs,
    }


def cmd_landscape(alpha, extent=(-4.0, 4.0), resolution=41):
    """Loss grid plus the stationary-point report for the deep model.

    Returns (grid rows, report). Each grid row is (a, b, loss); the
    report lists the five stationary points with kind, Hessian and the
    analytic gradient norm at the point.
    """
    if resolution < 16:
        raise ConfigurationError(f"resolution must be >= 16, got {resolution}")
    lo, hi = float(extent[0]), float(extent[1])
    if not lo < hi:
        raise ConfigurationError(f"extent must be (lo, hi) with lo < hi, got {extent}")
    A, B, L = landscape_grid(alpha, extent=(lo, hi), resolution=resolution)
    rows = list(zip(A.ravel(), B.ravel(), L.ravel()))
    points = []
    for sp in stationary_points(alpha):
        g = deep_maml_grad((sp.coords.a, sp.coords.b), alpha)
        points.append({
            "a": sp.coords.a, "b": sp.coords.b,
            "kind": sp.kind,
            "loss": deep_maml_loss((sp.coords.a, sp.coords.b), alpha),
            "hessian": np.asarray(sp.hessian).tolist(),
            "gradient_norm": float(np.hypot(*g)),
        })
    report = {
        "alpha": alpha,
        "extent": [lo, hi],
        "resolution": resolution,
        "stationary_points": points,
        "n_stationary_points": len(points),
    }
    return rows, report


def write_landscape(outdir, rows, report, trajectories=()):
    """landscape.csv + stationary.json (+ merged trajectories.csv)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "landscape.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "loss"])
        for a, b, loss in rows:
            w.writerow([repr(float(a)), repr(float(b)), repr(float(loss))])
    _write_json(outdir / "stationary.json", report)
    if trajectories:
        _merge_trajectories(outdir / "trajectories.csv", trajectories)


def _merge_trajectories(path, sources):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "a", "b"])
        for src in sources:
            src = Path(src)
            if not src.exists():
                raise ConfigurationError(f"trajectory file not found: {src}")
            with open(src, newline="") as inp:
                reader = csv.DictReader(inp)
                cols = reader.fieldnames or []
                if len(cols) != 3 or cols[0] != "iteration":
                    raise ConfigurationError(
                        f"{src} is not a 2-parameter trajectory CSV"
                    )
                for row in reader:
                    w.writerow([src.stem, row["iteration"],
                                row[cols[1]], row[cols[2]]])


def cmd_export_weights(checkpoint, out_path):
    """Flatten a checkpoint's parameters into a CSV of scalar entries."""
    model, xi, _ = load_checkpoint(checkpoint)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "tensor", "row", "col", "value"])
        for layer in model.layers:
            for (i, j), v in np.ndenumerate(layer.weight):
                w.writerow([layer.name, "weight", i, j, repr(float(v))])
            if layer.bias is not None:
                for (i, j), v in np.ndenumerate(layer.bias):
                    w.writerow([layer.name, "bias", i, j, repr(float(v))])
        if xi is not None:
            for key, entry in sorted(xi.tensors.items()):
                for name, tensor in sorted(entry.items()):
                    for (i, j), v in np.ndenumerate(np.atleast_2d(tensor)):
                        w.writerow([key, f"xi:{name}", i, j, repr(float(v))])
    return out_path


def cmd_export_tasks(task_cfg, n, seed, outdir):
    """Dump n meta-test episodes as CSV files; returns the paths."""
    if n <= 0:
        raise ConfigurationError(f"need a positive episode count, got {n}")
    if task_cfg.population:
        raise ConfigurationError("population episodes have no samples to export")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, episode in enumerate(eval_episodes(task_cfg, n, seed)):
        path = outdir / f"task_{i:03d}.csv"
        dump_csv(episode, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# verification suite


def cmd_verify(seed=0):
    """Run every invariant suite; report which passed and what failed.

    The report is machine-readable; the CLI exits 0 iff `passed` and
    names `first_failure` otherwise. Suites consult the live module
    state, so a corrupted backward rule fails the autodiff_fd suite.
    """
    suites = [
        ("autodiff_fd", _verify_autodiff_fd),
        ("exact_adaptation", _verify_exact_adaptation),
        ("kronecker_dense", _verify_kronecker_dense),
        ("reduction_chain", _verify_reduction_chain),
        ("oracle_engine", _verify_oracle_engine),
    ]
    report = {"passed": True, "first_failure": None, "suites": []}
    for name, fn in suites:
        t0 = time.perf_counter()
        try:
            passed, detail = fn(seed)
        except Exception as err:  # a crash is a failure, not a crash of verify
            passed, detail = False, {"error": f"{type(err).__name__}: {err}"}
        report["suites"].append({
            "name": name, "passed": passed, "detail": detail,
            "wall_ms": round((time.perf_counter() - t0) * 1e3, 3),
        })
        if not passed and report["first_failure"] is None:
            report["first_failure"] = name
            report["passed"] = False
    return report


def _fd_cases():
    """Scalar-leaf builders covering every differentiable primitive."""

    def pair_matrix(ls):
        return ad.reshape(ad.concat([a for a in ls], axis=0), 2, 2)

    def arith(ls):
        a, b, c = ls
        return (a + b) * c - b / (c * c + ad.bcast_scalar(a, 1, 1) * 0.0 + 2.0)

    def scalarops(ls):
        a, b = ls
        return 0.5 * a + (b * 3.0 - 1.25) * a

    def matmul_t(ls):
        m = pair_matrix(ls)
        return ad.sum_(m @ ad.transpose(m))

    def reductions(ls):
        m = pair_matrix(ls)
        return ad.sum_(ad.sum_rows(m)) + ad.sum_(ad.sum_cols(m)) + ad.mean(m)

    def broadcasts(ls):
        a, b = ls
        m = ad.bcast_rows(ad.bcast_scalar(a, 1, 3), 2) * ad.bcast_cols(
            ad.bcast_scalar(b, 2, 1), 3)
        return ad.sum_(m)

    def smooth(ls):
        a, b = ls
        return ad.exp(a * 0.3) + ad.log(b * b + 1.5) + ad.tanh(a * b)

    def gates(ls):
        a, b = ls
        return ad.sum_(ad.relu(pair_matrix([a, b, a * b, b - a]))) \
            + ad.softplus(a) + ad.sigmoid(b)

    def recip_sq(ls):
        a, = ls
        return ad.recip(a * a + 2.0) + ad.square(a)

    def slicing(ls):
        col = ad.concat([a for a in ls], axis=0)
        return ad.sum_(ad.slice_rows(col, 0, 2) * ad.slice_rows(col, 1, 3))

    def losses(ls):
        a, b = ls
        logits = ad.reshape(ad.concat([a, b, b - a, a * b], axis=0), 2, 2)
        onehot = logits.graph.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
        labels = logits.graph.constant(np.array([[1.0], [0.0]]))
        bin_logits = ad.reshape(ad.concat([a * b, b], axis=0), 2, 1)
        return ad.softmax_cross_entropy(logits, onehot) \
            + ad.sigmoid_cross_entropy(bin_logits, labels) \
            + ad.mse(bin_logits, labels)

    def second_order(ls):
        a, b = ls
        y = ad.tanh(a * b) + ad.exp(a * 0.25) * ad.sigmoid(b)
        return ad.grad(y, [a], create_graph=True)[0]

    return [
        ("arith", arith, [0.7, -1.3, 0.4]),
        ("scalarops", scalarops, [0.9, -0.2]),
        ("matmul_transpose", matmul_t, [0.5, -0.8, 1.1, 0.3]),
        ("reductions", reductions, [0.5, -0.8, 1.1, 0.3]),
        ("broadcasts", broadcasts, [0.6, -0.9]),
        ("smooth", smooth, [0.4, 0.8]),
        ("gates", gates, [0.7, -0.6]),
        ("recip_square", recip_sq, [0.8]),
        ("concat_slice", slicing, [0.2, -0.5, 0.9]),
        ("losses", losses, [0.3, -0.7]),
        ("second_order", second_order, [0.45, -0.35]),
    ]


def _verify_autodiff_fd(seed):
    tol = 1e-6
    errors = {}
    for name, builder, point in _fd_cases():
        errors[name] = float(ad.finite_diff_check(builder, point))
    worst = max(errors, key=errors.get)
    return max(errors.values()) < tol, {
        "tolerance": tol, "max_rel_error": errors[worst],
        "worst_case": worst, "per_case": errors,
    }


def _verify_exact_adaptation(seed):
    rng = stream_rng(seed, STREAM_TASK, 10)
    worst = 0.0
    for _ in range(200):
        alpha = rng.uniform(0.01, 0.5)
        a = 1.0 / math.sqrt(alpha)
        b = rng.standard_normal()
        theta = rng.standard_normal()
        adapted = deep_one_step_adapt((a, b), theta, alpha, freeze_a=True)
        worst = max(worst, abs(adapted.a * adapted.b - theta))
    return worst < 1e-12, {"tolerance": 1e-12, "max_error": worst, "n": 200}


def _verify_kronecker_dense(seed):
    rng = stream_rng(seed, STREAM_TASK, 11)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 7))
        L = rng.standard_normal((n, n))
        R = rng.standard_normal((m, m))
        G = rng.standard_normal((n, m))
        dense = kron_dense(L, R) @ G.reshape(-1, 1, order="F")
        factored = L @ G @ R
        worst = max(worst, float(np.max(np.abs(
            dense.reshape(n, m, order="F") - factored))))
    return worst < 1e-12, {"tolerance": 1e-12, "max_error": worst, "n": 200}


def _verify_reduction_chain(seed):
    task_cfg = TaskConfig(kind="regression1d", population=True)
    inner = InnerConfig(alpha=0.1, steps=1)
    outer = OuterConfig(beta=0.02, meta_batch=8, iterations=1, learn_xi=False)
    episodes = eval_episodes(task_cfg, 8 * 25, seed)
    spec = ModelSpec(kind="deep1d")
    detail = {}
    ok = True
    for kind in ("msgd", "mc", "kfo"):
        plain = build_model(spec, seed)
        fancy = build_model(spec, seed)
        xi = init_xi(OptimizerSpec(kind=kind), fancy)
        exact = True
        for step in range(25):
            batch = episodes[step * 8: (step + 1) * 8]
            plain, _, _ = meta_step(plain, None, batch, inner, outer)
            fancy, xi, _ = meta_step(fancy, xi, batch, inner, outer)
            for (k1, v1), (k2, v2) in zip(plain.param_items(),
                                          fancy.param_items()):
                if not np.array_equal(v1, v2):
                    exact = False
        detail[kind] = "bit-for-bit" if exact else "diverged from plain MAML"
        ok = ok and exact
    return ok, detail


def _verify_oracle_engine(seed):
    rng = stream_rng(seed, STREAM_TASK, 12)
    inner = InnerConfig(alpha=0.1, steps=1)
    spec = ModelSpec(kind="deep1d")
    worst = 0.0
    for _ in range(100):
        a, b = rng.standard_normal(2)
        theta = rng.standard_normal()
        model = build_model(spec, 0)
        model.layers[0].weight[:] = a
        model.layers[1].weight[:] = b
        episode = _population_episode(theta)
        _, _, trace = adapt(model, None, episode, inner)
        adapted = deep_one_step_adapt((a, b), theta, 0.1)
        want = 0.5 * ((adapted.a * adapted.b - theta) ** 2 + 1.0)
        worst = max(worst, abs(trace.query_loss - want))
    pointwise_ok = worst < 1e-12

    grid = [(x, y) for x in (-2.0, 0.0, 2.0) for y in (-2.0, 0.0, 2.0)]
    means, ses = mc_landscape(grid, 0.1, 200_000, seed)
    closed = np.array([deep_maml_loss(p, 0.1) for p in grid])
    dev = np.abs(means - (closed + 0.5))
    mc_ok = bool(np.all(dev <= 4.0 * ses))

    h_min = stationary_points(0.1)[1].hessian
    eigs = sorted(float(e) for e in np.linalg.eigvalsh(h_min))
    return pointwise_ok and mc_ok, {
        "pointwise_max_error": worst,
        "mc_max_dev_over_se": float(np.max(dev / ses)),
        "minimum_hessian_eigenvalues": eigs,
    }


def _population_episode(theta):
    from .tasks import TaskParams, population_dataset

    return population_dataset(TaskParams(kind="regression1d", theta=float(theta)))
