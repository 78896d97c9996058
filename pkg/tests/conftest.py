"""Shared fixtures and the acceptance-criteria terminal summary.

The benchmark fixtures train the shipped configs once per session; the
acceptance tests and the harness tests reuse the same records so the
whole suite stays fast.
"""

import re
from pathlib import Path

import pytest

from metagrad import experiments as ex

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

ACCEPTANCE_TITLES = {
    1: "analytic stationary structure",
    2: "meta-gradient matches finite differences",
    3: "one-step exact adaptation",
    4: "deep beats shallow post-adaptation",
    5: "logistic failure/rescue accuracy bands",
    6: "collapse destroys adaptation",
    7: "Kronecker-factored optimizer algebra",
    8: "oracle and engine agree on the landscape",
    9: "layer ablation direction",
}


@pytest.fixture(scope="session")
def bench_configs():
    """The shipped synthetic-benchmark configs, keyed by arm."""
    return {
        "lr": ex.load_config(CONFIG_DIR / "synthetic_lr.toml", seed_env=""),
        "linnet3": ex.load_config(CONFIG_DIR / "synthetic_linnet3.toml",
                                  seed_env=""),
        "kfo0": ex.load_config(CONFIG_DIR / "synthetic_kfo0.toml", seed_env=""),
    }


@pytest.fixture(scope="session")
def bench_runs(bench_configs, tmp_path_factory):
    """cmd_train artifacts for all three benchmark arms (all seeds)."""
    out = {}
    for arm, cfg in bench_configs.items():
        root = tmp_path_factory.mktemp(f"bench_{arm}")
        summary, outdir = ex.cmd_train(cfg, outdir=root)
        out[arm] = {"summary": summary, "outdir": outdir, "config": cfg}
    return out


@pytest.fixture(scope="session")
def linnet_checkpoint(bench_runs):
    """(model, xi, config) of the overparameterized arm's first seed."""
    outdir = bench_runs["linnet3"]["outdir"]
    return ex.load_run_context(outdir / "checkpoint_seed0.json")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcome = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", nodeid)
            if m:
                outcome[int(m.group(1))] = status == "passed"
    if not outcome:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(outcome):
        status = "PASS" if outcome[n] else "FAIL"
        terminalreporter.write_line(
            f"ACCEPTANCE {n}: {status} - {ACCEPTANCE_TITLES[n]}"
        )
