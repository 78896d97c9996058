"""Task distributions: determinism, split shapes, and label semantics."""

import csv

import numpy as np
import pytest

from metagrad.errors import ContractError
from metagrad.rng import STREAM_DATA, STREAM_TASK, stream_rng
from metagrad.tasks import (
    KINDS,
    dump_csv,
    draw_data,
    draw_task,
    population_dataset,
    sample_data,
    sample_kway_task,
    sample_logistic_task,
    sample_regression_task,
)


def test_kinds_constant():
    assert KINDS == ("regression1d", "logistic2d", "kway")


def test_task_sampling_is_pure_in_seed():
    a = sample_regression_task(7)
    b = sample_regression_task(7)
    c = sample_regression_task(8)
    assert a.theta == b.theta
    assert a.theta != c.theta
    la = sample_logistic_task(3, dim=4)
    lb = sample_logistic_task(3, dim=4)
    assert np.array_equal(la.theta, lb.theta)
    assert la.theta.shape == (4,)
    ka = sample_kway_task(5, ways=3, dim=2)
    assert ka.theta.shape == (3, 2)
    assert np.array_equal(ka.theta, sample_kway_task(5, ways=3, dim=2).theta)


def test_kway_requires_two_ways():
    with pytest.raises(ContractError):
        sample_kway_task(0, ways=1)
    with pytest.raises(ContractError):
        draw_task(stream_rng(0, STREAM_TASK), "kway", ways=1)


def test_draw_task_unknown_kind():
    with pytest.raises(ContractError, match="unknown task kind"):
        draw_task(stream_rng(0, STREAM_TASK), "images")


def test_regression_episode_shapes_and_noise():
    task = sample_regression_task(0)
    data = sample_data(task, shots=10, query_size=25, seed=0)
    assert data.support_x.shape == (10, 1)
    assert data.support_y.shape == (10, 1)
    assert data.query_x.shape == (25, 1)
    assert data.query_y.shape == (25, 1)
    assert data.ways == 1
    clean = sample_data(task, shots=10, query_size=25, seed=0, noiseless=True)
    np.testing.assert_allclose(clean.support_y,
                               float(task.theta) * clean.support_x)
    # the noisy draw differs from the noiseless signal
    assert not np.allclose(data.support_y, float(task.theta) * data.support_x)


def test_classification_support_is_shots_times_ways():
    task = sample_logistic_task(1, dim=2)
    data = sample_data(task, shots=5, query_size=20, seed=0)
    assert data.support_x.shape == (10, 2)
    assert data.ways == 2
    kway = sample_kway_task(1, ways=4, dim=3)
    kd = sample_data(kway, shots=5, query_size=20, seed=0)
    assert kd.support_x.shape == (20, 3)
    assert kd.ways == 4


def test_episode_is_pure_function_of_task_and_seed():
    task = sample_logistic_task(2)
    a = sample_data(task, shots=5, query_size=10, seed=11)
    b = sample_data(task, shots=5, query_size=10, seed=11)
    c = sample_data(task, shots=5, query_size=10, seed=12)
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.query_y, b.query_y)
    assert not np.array_equal(a.support_x, c.support_x)


def test_support_and_query_use_disjoint_substreams():
    task = sample_regression_task(4)
    data = sample_data(task, shots=8, query_size=8, seed=4, noiseless=True)
    # same substream indices as the implementation contract
    sup = stream_rng(4, STREAM_DATA, 0).standard_normal((8, 1))
    qry = stream_rng(4, STREAM_DATA, 1).standard_normal((8, 1))
    np.testing.assert_array_equal(data.support_x, sup)
    np.testing.assert_array_equal(data.query_x, qry)
    assert not np.array_equal(data.support_x, data.query_x)


def test_noiseless_logistic_uses_decision_boundary():
    task = sample_logistic_task(9, dim=3)
    data = sample_data(task, shots=20, query_size=30, seed=5, noiseless=True)
    for x, y in ((data.support_x, data.support_y), (data.query_x, data.query_y)):
        want = (x @ task.theta > 0).astype(np.float64).reshape(-1, 1)
        np.testing.assert_array_equal(y, want)


def test_noisy_logistic_labels_are_bernoulli_mix():
    task = sample_logistic_task(9, dim=2)
    data = sample_data(task, shots=200, query_size=10, seed=5)
    flips = np.mean(data.support_y.ravel()
                    != (data.support_x @ task.theta > 0).astype(np.float64))
    assert 0.0 < flips < 0.5


def test_kway_labels_are_hard_argmax():
    task = sample_kway_task(3, ways=3, dim=2)
    data = sample_data(task, shots=10, query_size=40, seed=2)
    want = np.argmax(data.query_x @ task.theta.T, axis=1)
    np.testing.assert_array_equal(data.query_y.ravel(), want.astype(np.float64))
    assert set(np.unique(data.support_y)) <= {0.0, 1.0, 2.0}


def test_sample_data_rejects_empty_splits():
    task = sample_regression_task(0)
    with pytest.raises(ContractError):
        sample_data(task, shots=0, query_size=5, seed=0)
    with pytest.raises(ContractError):
        sample_data(task, shots=5, query_size=0, seed=0)


def test_population_dataset_contract():
    task = sample_regression_task(6)
    pop = population_dataset(task)
    assert pop.population
    assert pop.support_x.shape == (0, 1)
    assert pop.theta == pytest.approx(float(task.theta))
    with pytest.raises(ContractError):
        population_dataset(sample_logistic_task(0))


def test_draw_data_advances_one_stream():
    task = sample_logistic_task(7)
    rng = stream_rng(7, STREAM_DATA)
    a = draw_data(task, 5, 10, rng)
    b = draw_data(task, 5, 10, rng)
    assert not np.array_equal(a.support_x, b.support_x)
    again = stream_rng(7, STREAM_DATA)
    a2 = draw_data(task, 5, 10, again)
    assert np.array_equal(a.support_x, a2.support_x)
    assert np.array_equal(a.query_y, a2.query_y)


def test_dump_csv_round_trips_values(tmp_path):
    task = sample_logistic_task(1, dim=2)
    data = sample_data(task, shots=3, query_size=4, seed=1)
    path = tmp_path / "task.csv"
    dump_csv(data, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["split", "x0", "x1", "label"]
    support = [r for r in rows[1:] if r[0] == "support"]
    query = [r for r in rows[1:] if r[0] == "query"]
    assert len(support) == 6 and len(query) == 4
    got = np.array([[float(v) for v in r[1:3]] for r in support])
    np.testing.assert_array_equal(got, data.support_x)
    labels = np.array([float(r[3]) for r in query]).reshape(-1, 1)
    np.testing.assert_array_equal(labels, data.query_y)
