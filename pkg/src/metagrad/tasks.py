"""Seeded generators for the synthetic task distributions.

Three task families:
  regression1d: scalar theta ~ N(0,1); y = theta*x + eps, x, eps ~ N(0,1)
  logistic2d:   theta ~ N(0,I_d); y ~ Bernoulli(sigmoid(theta.x))
  kway:         theta rows ~ N(0,I_d); label = argmax_k theta_k.x (hard)

Whole datasets are pure functions of (task, seed); support and query
come from disjoint substreams of the data stream.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import STREAM_DATA, STREAM_TASK, stream_rng

KINDS = ("regression1d", "logistic2d", "kway")


@dataclass
class TaskParams:
    """Generative parameters of one task."""

    kind: str
    theta: np.ndarray  # () scalar, (d,) binary, or (k, d) k-way


@dataclass
class Dataset:
    """Support/query split of one task episode.

    Classification labels are class indices stored as an (n, 1) float
    column. `theta` keeps the generating parameters around for
    population-loss and oracle evaluations; population datasets carry
    no sampled rows at all.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    shots: int
    ways: int
    kind: str = "regression1d"
    theta: np.ndarray = None
    population: bool = False


def sample_regression_task(seed):
    """Scalar theta_tau ~ N(0,1) from the task stream of `seed`."""
    rng = stream_rng(seed, STREAM_TASK)
    return TaskParams("regression1d", rng.standard_normal())


def sample_logistic_task(seed, dim=2):
    """Binary decision-boundary parameters theta ~ N(0, I_dim)."""
    rng = stream_rng(seed, STREAM_TASK)
    return TaskParams("logistic2d", rng.standard_normal(dim))


def sample_kway_task(seed, ways, dim=2):
    """K linear class scores; rows of theta are i.i.d. N(0, I_dim)."""
    if ways < 2:
        raise ContractError(f"ways must be >= 2, got {ways}")
    rng = stream_rng(seed, STREAM_TASK)
    return TaskParams("kway", rng.standard_normal((ways, dim)))


def _draw_split(task, n, rng, noiseless):
    if task.kind == "regression1d":
        x = rng.standard_normal((n, 1))
        y = float(task.theta) * x
        if not noiseless:
            y = y + rng.standard_normal((n, 1))
        return x, y
    if task.kind == "logistic2d":
        d = task.theta.shape[0]
        x = rng.standard_normal((n, d))
        z = x @ task.theta
        if noiseless:
            y = (z > 0).astype(np.float64).reshape(n, 1)
        else:
            p = 1.0 / (1.0 + np.exp(-z))
            y = (rng.random(n) < p).astype(np.float64).reshape(n, 1)
        return x, y
    if task.kind == "kway":
        k, d = task.theta.shape
        x = rng.standard_normal((n, d))
        y = np.argmax(x @ task.theta.T, axis=1).astype(np.float64).reshape(n, 1)
        return x, y
    raise ContractError(f"unknown task kind {task.kind!r}")


def _split_sizes(task, shots, query_size):
    ways = 1
    if task.kind == "logistic2d":
        ways = 2
    elif task.kind == "kway":
        ways = task.theta.shape[0]
    n_support = shots * ways if ways > 1 else shots
    return n_support, ways


def sample_data(task, shots, query_size, seed, noiseless=False):
    """Sample a support/query episode for `task`.

    Support has shots*ways rows for classification, shots rows for
    regression. Query rows come from a disjoint substream. The
    `noiseless` flag drops the regression observation noise; for
    logistic2d it replaces Bernoulli sampling with the deterministic
    decision boundary y = 1[theta^T x > 0].
    """
    if shots <= 0 or query_size <= 0:
        raise ContractError("shots and query_size must be positive")
    n_support, ways = _split_sizes(task, shots, query_size)
    sx, sy = _draw_split(task, n_support, stream_rng(seed, STREAM_DATA, 0), noiseless)
    qx, qy = _draw_split(task, query_size, stream_rng(seed, STREAM_DATA, 1), noiseless)
    return Dataset(sx, sy, qx, qy, shots=shots, ways=ways,
                   kind=task.kind, theta=np.asarray(task.theta, dtype=np.float64))


def population_dataset(task):
    """Dataset stand-in for the analytic population regression loss.

    The engine recognizes `population=True` and builds the loss
    0.5*((coeff - theta)^2 + 1) directly from the model's effective
    coefficient, no sampled rows involved.
    """
    if task.kind != "regression1d":
        raise ContractError("population losses are defined for regression1d tasks")
    empty = np.zeros((0, 1))
    return Dataset(empty, empty, empty, empty, shots=0, ways=1,
                   kind=task.kind, theta=np.asarray(task.theta, dtype=np.float64),
                   population=True)


def draw_task(rng, kind, ways=2, dim=2):
    """Task from an already-positioned generator (training-loop path)."""
    if kind == "regression1d":
        return TaskParams(kind, rng.standard_normal())
    if kind == "logistic2d":
        return TaskParams(kind, rng.standard_normal(dim))
    if kind == "kway":
        if ways < 2:
            raise ContractError(f"ways must be >= 2, got {ways}")
        return TaskParams(kind, rng.standard_normal((ways, dim)))
    raise ContractError(f"unknown task kind {kind!r}")


def draw_data(task, shots, query_size, rng, noiseless=False):
    """Episode from an already-positioned generator (training-loop path)."""
    n_support, ways = _split_sizes(task, shots, query_size)
    sx, sy = _draw_split(task, n_support, rng, noiseless)
    qx, qy = _draw_split(task, query_size, rng, noiseless)
    return Dataset(sx, sy, qx, qy, shots=shots, ways=ways,
                   kind=task.kind, theta=np.asarray(task.theta, dtype=np.float64))


def dump_csv(dataset, path):
    """Write an episode to CSV with columns split, x..., label."""
    d = dataset.support_x.shape[1] if dataset.support_x.size else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + [f"x{i}" for i in range(d)] + ["label"])
        for split, xs, ys in (("support", dataset.support_x, dataset.support_y),
                              ("query", dataset.query_x, dataset.query_y)):
            for row, y in zip(xs, ys):
                w.writerow([split] + [repr(float(v)) for v in row] + [repr(float(y[0]))])
