"""Compare the compiled and pure-Python graph cores on the hot paths.

Usage: python3 benchmarks/bench_backends.py [--repeat N]

Runs the same workloads under both backends in subprocesses (backend
choice is fixed at import time) and prints per-workload timings plus
the speedup. Workloads cover the two kernels that dominate wall time:
re-evaluating a bound graph after leaf rebinds (the episode cache hit
path) and full meta-training steps.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json
import sys
import time

import numpy as np

from metagrad import backend
from metagrad.engine import (InnerConfig, OuterConfig, TaskConfig, TrainConfig,
                             eval_episodes, evaluate, meta_train)
from metagrad.models import ModelSpec, build_model
from metagrad import autodiff as ad


def time_block(fn, repeat):
    fn()  # warm caches and JIT-free import costs
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_rebind():
    g = ad.Graph()
    leaves = [g.leaf((8, 8)) for _ in range(4)]
    rng = np.random.default_rng(0)
    for v in leaves:
        g.bind(v, rng.standard_normal((8, 8)))
    out = leaves[0]
    for v in leaves[1:]:
        out = ad.tanh(out @ v) + out * 0.5
    loss = ad.sum_(out)
    grads = ad.grad(loss, leaves)

    def run():
        for i in range(200):
            g.bind(leaves[i % 4], rng.standard_normal((8, 8)))
            loss.item()
            for gr in grads:
                gr.value

    return run


def bench_deep1d():
    cfg = TrainConfig(
        model=ModelSpec(kind="deep1d"),
        inner=InnerConfig(alpha=0.1, steps=3),
        outer=OuterConfig(beta=0.01, meta_batch=16, iterations=150),
        task=TaskConfig(kind="regression1d", population=True),
        eval_tasks=0,
    )
    return lambda: meta_train(cfg, 0)


def bench_linnet_eval():
    spec = ModelSpec(kind="linnet", input_dim=2, output_dim=1, hidden=(2, 2, 2))
    model = build_model(spec, 0)
    task = TaskConfig(kind="logistic2d", shots=50, query=20, noiseless=True)
    episodes = eval_episodes(task, 100, 0)
    inner = InnerConfig(alpha=0.9, steps=1)
    return lambda: evaluate(model, None, episodes, inner)


repeat = int(sys.argv[1])
results = {"backend": backend.backend_name()}
for name, make in (("graph_rebind", bench_rebind),
                   ("deep1d_meta_train", bench_deep1d),
                   ("linnet_eval_100_tasks", bench_linnet_eval)):
    results[name] = time_block(make(), repeat)
print(json.dumps(results))
"""


def run_backend(backend, repeat):
    env = dict(os.environ, METAGRAD_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-c", WORKER, str(repeat)],
        capture_output=True, text=True, env=env, check=False,
    )
    if out.returncode != 0:
        sys.stderr.write(out.stderr)
        raise SystemExit(f"{backend} backend worker failed")
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions per workload (best of N)")
    args = parser.parse_args()
    fast = run_backend("fast", args.repeat)
    py = run_backend("python", args.repeat)
    if fast["backend"] != "fast" or py["backend"] != "python":
        raise SystemExit("backend selection failed; check the build")
    workloads = [k for k in fast if k != "backend"]
    width = max(len(w) for w in workloads)
    print(f"{'workload'.ljust(width)}  {'fast':>10}  {'python':>10}  speedup")
    for w in workloads:
        print(f"{w.ljust(width)}  {fast[w] * 1e3:>8.2f}ms  {py[w] * 1e3:>8.2f}ms"
              f"  {py[w] / fast[w]:>6.2f}x")


if __name__ == "__main__":
    main()
