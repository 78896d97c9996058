"""Bilevel engine: adaptation vs the oracle, meta-gradients, training."""

import math

import numpy as np
import pytest

import metagrad.autodiff as ad
from metagrad.engine import (
    InnerConfig,
    OuterConfig,
    TaskConfig,
    TrainConfig,
    adapt,
    build_meta_loss,
    clear_program_cache,
    eval_episodes,
    evaluate,
    maml_meta_loss,
    meta_step,
    meta_train,
)
from metagrad.errors import ConfigurationError, ContractError, DivergenceError
from metagrad.models import ModelSpec, build_model, set_freeze
from metagrad.optimizers import OptimizerSpec, init_xi
from metagrad.oracle import deep_one_step_adapt
from metagrad.tasks import (
    population_dataset,
    sample_data,
    sample_kway_task,
    sample_logistic_task,
    sample_regression_task,
)

ALPHA = 0.1
INNER1 = InnerConfig(alpha=ALPHA, steps=1)


def _deep_model(a, b):
    model = build_model(ModelSpec(kind="deep1d"), 0)
    model.set_param_values({"a": np.array([[a]]), "b": np.array([[b]])})
    return model


def _population_episodes(thetas):
    from metagrad.tasks import TaskParams
    return [population_dataset(TaskParams("regression1d", float(t)))
            for t in thetas]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        InnerConfig(alpha=0.0)
    with pytest.raises(ConfigurationError):
        InnerConfig(alpha=0.1, steps=0)
    with pytest.raises(ConfigurationError):
        OuterConfig(beta=-1.0)
    with pytest.raises(ConfigurationError):
        OuterConfig(beta=0.1, meta_batch=0)
    with pytest.raises(ConfigurationError):
        OuterConfig(beta=0.1, outer_rule="rmsprop")
    with pytest.raises(ConfigurationError):
        TaskConfig(kind="omniglot")
    with pytest.raises(ConfigurationError):
        TaskConfig(kind="logistic2d", population=True)
    with pytest.raises(ConfigurationError):
        TaskConfig(n_train_tasks=-1)


def test_adapt_matches_oracle_population():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, theta = rng.normal(size=3)
        model = _deep_model(a, b)
        episode = _population_episodes([theta])[0]
        adapted, _, trace = adapt(model, None, episode, INNER1)
        want = deep_one_step_adapt((a, b), theta, ALPHA)
        assert adapted.layers[0].weight[0, 0] == pytest.approx(want.a, abs=1e-12)
        assert adapted.layers[1].weight[0, 0] == pytest.approx(want.b, abs=1e-12)
        res = want.a * want.b - theta
        assert trace.query_loss == pytest.approx(0.5 * (res * res + 1), abs=1e-12)


def test_adapt_multi_step_matches_iterated_oracle():
    model = _deep_model(0.8, -0.6)
    episode = _population_episodes([1.3])[0]
    adapted, _, trace = adapt(model, None, episode,
                              InnerConfig(alpha=ALPHA, steps=4))
    p = (0.8, -0.6)
    for _ in range(4):
        p = deep_one_step_adapt(p, 1.3, ALPHA)
        p = (p.a, p.b)
    assert adapted.layers[0].weight[0, 0] == pytest.approx(p[0], abs=1e-12)
    assert adapted.layers[1].weight[0, 0] == pytest.approx(p[1], abs=1e-12)
    assert len(trace.params) == 5
    assert len(trace.support_losses) == 5


def test_adapt_respects_frozen_layers():
    a0 = 1.0 / math.sqrt(ALPHA)
    model = set_freeze(_deep_model(a0, 0.0), [True, False])
    for theta in (-1.2, 0.4, 2.0):
        episode = _population_episodes([theta])[0]
        adapted, _, _ = adapt(model, None, episode, INNER1)
        want = deep_one_step_adapt((a0, 0.0), theta, ALPHA, freeze_a=True)
        assert adapted.layers[0].weight[0, 0] == a0
        assert adapted.layers[1].weight[0, 0] == pytest.approx(want.b, abs=1e-12)
        # one frozen-a step solves the task exactly
        prod = adapted.layers[0].weight[0, 0] * adapted.layers[1].weight[0, 0]
        assert prod == pytest.approx(theta, abs=1e-12)


def test_adapt_reports_classification_accuracy():
    task = sample_logistic_task(3)
    data = sample_data(task, shots=10, query_size=50, seed=3, noiseless=True)
    model = build_model(ModelSpec(kind="logistic", input_dim=2, output_dim=1,
                                  biases=False), 0)
    _, _, trace = adapt(model, None, data, InnerConfig(alpha=0.5, steps=3))
    assert trace.query_accuracy is not None
    assert 0.0 <= trace.query_accuracy <= 1.0
    reg = sample_data(sample_regression_task(0), shots=5, query_size=5, seed=0)
    _, _, rtrace = adapt(build_model(ModelSpec(kind="shallow1d"), 0), None,
                         reg, INNER1)
    assert rtrace.query_accuracy is None


def test_adapt_rejects_empty_support():
    from metagrad.tasks import Dataset
    empty = np.zeros((0, 1))
    data = Dataset(empty, empty, np.zeros((3, 1)), np.zeros((3, 1)),
                   shots=0, ways=1)
    model = build_model(ModelSpec(kind="shallow1d"), 0)
    with pytest.raises(ContractError, match="support"):
        adapt(model, None, data, INNER1)


def test_adapt_divergence_carries_step():
    model = build_model(ModelSpec(kind="deep1d"), 0)
    data = sample_data(sample_regression_task(0), shots=5, query_size=5, seed=0)
    with pytest.raises(DivergenceError) as exc:
        adapt(model, None, data, InnerConfig(alpha=1e6, steps=1))
    assert exc.value.step == 1


def test_meta_loss_equals_mean_oracle_plus_offset():
    thetas = [-1.4, 0.2, 0.9, 2.2]
    model = _deep_model(0.7, -0.3)
    loss = maml_meta_loss(model, None, _population_episodes(thetas), INNER1)
    per_task = []
    for t in thetas:
        p = deep_one_step_adapt((0.7, -0.3), t, ALPHA)
        r = p.a * p.b - t
        per_task.append(0.5 * (r * r + 1.0))
    assert loss.item() == pytest.approx(np.mean(per_task), abs=1e-12)


def test_meta_gradient_matches_finite_differences():
    thetas = [0.4, -1.1, 1.8]
    episodes = _population_episodes(thetas)
    inner = InnerConfig(alpha=ALPHA, steps=2)

    def value(a, b):
        return maml_meta_loss(_deep_model(a, b), None, episodes, inner).item()

    g = ad.Graph()
    loss, leaves, _ = build_meta_loss(g, _deep_model(0.9, 0.5), None,
                                      episodes, inner)
    ga, gb = ad.grad(loss, [leaves["a"], leaves["b"]], create_graph=False)
    h = 1e-6
    fd_a = (value(0.9 + h, 0.5) - value(0.9 - h, 0.5)) / (2 * h)
    fd_b = (value(0.9, 0.5 + h) - value(0.9, 0.5 - h)) / (2 * h)
    assert ga.item() == pytest.approx(fd_a, rel=1e-6, abs=1e-8)
    assert gb.item() == pytest.approx(fd_b, rel=1e-6, abs=1e-8)


def test_first_order_gradient_differs_from_second_order():
    episodes = _population_episodes([0.7, -0.9])

    def meta_grad(first_order):
        inner = InnerConfig(alpha=ALPHA, steps=1, first_order=first_order)
        g = ad.Graph()
        loss, leaves, _ = build_meta_loss(g, _deep_model(1.1, 0.4), None,
                                          episodes, inner)
        ga, gb = ad.grad(loss, [leaves["a"], leaves["b"]], create_graph=False)
        return np.array([ga.item(), gb.item()])

    second = meta_grad(False)
    first = meta_grad(True)
    assert not np.allclose(second, first)


def test_meta_loss_rejects_bad_inputs():
    model = _deep_model(1.0, 1.0)
    with pytest.raises(ContractError, match="nonempty"):
        maml_meta_loss(model, None, [], INNER1)
    with pytest.raises(ContractError, match="nonempty"):
        meta_step(model, None, [], INNER1, OuterConfig(beta=0.1))
    mlp = build_model(ModelSpec(kind="mlp", input_dim=1, output_dim=1,
                                hidden=(2,), activation="tanh"), 0)
    with pytest.raises(ContractError, match="shallow1d/deep1d"):
        maml_meta_loss(mlp, None, _population_episodes([0.5]), INNER1)


def _meta_grad_arrays(model, episodes, inner):
    g = ad.Graph()
    loss, leaves, _ = build_meta_loss(g, model, None, episodes, inner)
    keys = [k for k, _ in model.param_items()]
    gs = ad.grad(loss, [leaves[k] for k in keys], create_graph=False)
    return {k: v.value.copy() for k, v in zip(keys, gs)}


def test_outer_rule_sgd_matches_manual():
    episodes = _population_episodes([0.3, -0.7, 1.2])
    model = _deep_model(0.8, 0.6)
    grads = _meta_grad_arrays(model, episodes, INNER1)
    outer = OuterConfig(beta=0.05, outer_rule="sgd")
    new_model, _, metrics = meta_step(model, None, episodes, INNER1, outer)
    for k, v in model.param_items():
        want = v - 0.05 * grads[k]
        np.testing.assert_allclose(dict(new_model.param_items())[k], want,
                                   atol=1e-12)
    want_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert metrics["grad_norm"] == pytest.approx(want_norm, rel=1e-9)
    assert metrics["meta_loss"] == pytest.approx(
        maml_meta_loss(model, None, episodes, INNER1).item(), abs=1e-12)


def test_outer_rule_momentum_matches_manual():
    episodes = _population_episodes([0.5, -1.3])
    model0 = _deep_model(1.2, -0.4)
    outer = OuterConfig(beta=0.05, outer_rule="sgd-momentum", momentum=0.9)
    from metagrad.engine import OuterState
    state = OuterState()
    g1 = _meta_grad_arrays(model0, episodes, INNER1)
    model1, _, _ = meta_step(model0, None, episodes, INNER1, outer, state=state)
    g2 = _meta_grad_arrays(model1, episodes, INNER1)
    model2, _, _ = meta_step(model1, None, episodes, INNER1, outer, state=state)
    p0 = dict(model0.param_items())
    p2 = dict(model2.param_items())
    for k in p0:
        v1 = g1[k]
        v2 = 0.9 * v1 + g2[k]
        want = (p0[k] - 0.05 * v1) - 0.05 * v2
        np.testing.assert_allclose(p2[k], want, atol=1e-10)


def test_outer_rule_adam_matches_manual():
    episodes = _population_episodes([0.9])
    model = _deep_model(0.5, 1.5)
    grads = _meta_grad_arrays(model, episodes, INNER1)
    outer = OuterConfig(beta=0.01, outer_rule="adam")
    new_model, _, _ = meta_step(model, None, episodes, INNER1, outer)
    for k, v in model.param_items():
        g = grads[k]
        want = v - 0.01 * g / (np.abs(g) + 1e-8)  # bias-corrected t=1 form
        np.testing.assert_allclose(dict(new_model.param_items())[k], want,
                                   atol=1e-10)


def test_meta_step_learns_xi_only_when_asked():
    episodes = _population_episodes([0.4, 1.1])
    model = _deep_model(0.9, 0.7)
    spec = OptimizerSpec(kind="msgd")
    xi = init_xi(spec, model)
    frozen = OuterConfig(beta=0.05, learn_xi=False)
    _, xi_same, _ = meta_step(model, xi, episodes, INNER1, frozen)
    assert xi_same is xi
    learned = OuterConfig(beta=0.05, learn_xi=True)
    _, xi_new, _ = meta_step(model, xi, episodes, INNER1, learned)
    changed = any(
        not np.array_equal(xi_new.tensors[k][n], xi.tensors[k][n])
        for k in xi.tensors for n in xi.tensors[k])
    assert changed
    # and the original xi arrays were not mutated in place
    assert np.array_equal(xi.tensors["a"]["d"], np.ones((1, 1)))


def test_meta_step_divergence_error():
    episodes = _population_episodes([0.5])
    model = _deep_model(1e6, 1e6)
    with pytest.raises(DivergenceError):
        meta_step(model, None, episodes, INNER1, OuterConfig(beta=0.1))


def test_evaluate_fields_per_kind():
    inner = InnerConfig(alpha=0.5, steps=1)
    cls = build_model(ModelSpec(kind="logistic", input_dim=2, output_dim=1,
                                biases=False), 0)
    cls_eps = [sample_data(sample_logistic_task(i), 5, 10, seed=i)
               for i in range(4)]
    out = evaluate(cls, None, cls_eps, inner)
    assert out["accuracy"] is not None and out["mse"] is None
    assert len(out["per_task_loss"]) == len(out["per_task_accuracy"]) == 4

    reg = build_model(ModelSpec(kind="shallow1d"), 0)
    reg_eps = [sample_data(sample_regression_task(i), 5, 10, seed=i)
               for i in range(3)]
    out = evaluate(reg, None, reg_eps, inner)
    assert out["accuracy"] is None and out["mse"] is not None

    pop_eps = _population_episodes([0.3, -0.6])
    deep = _deep_model(0.7, 0.7)
    out = evaluate(deep, None, pop_eps, INNER1)
    for theta, mse in zip((0.3, -0.6), out["per_task_mse"]):
        p = deep_one_step_adapt((0.7, 0.7), theta, ALPHA)
        assert mse == pytest.approx((p.a * p.b - theta) ** 2, abs=1e-12)


def test_evaluate_kway_accuracy():
    model = build_model(ModelSpec(kind="logistic", input_dim=2, output_dim=3,
                                  biases=False), 0)
    eps = [sample_data(sample_kway_task(i, ways=3), 5, 12, seed=i)
           for i in range(3)]
    out = evaluate(model, None, eps, InnerConfig(alpha=0.5, steps=2))
    assert 0.0 <= out["accuracy"] <= 1.0
    assert len(out["per_task_accuracy"]) == 3


def test_program_cache_reuse_and_rebinding():
    clear_program_cache()
    from metagrad.engine import _get_program
    eps = _population_episodes([0.4])
    model = _deep_model(0.8, 0.2)
    p1 = _get_program(model, None, eps, INNER1, True)
    p2 = _get_program(_deep_model(2.0, -1.0), None,
                      _population_episodes([1.9]), INNER1, True)
    assert p1 is p2  # same structure, same program
    clear_program_cache()
    p3 = _get_program(model, None, eps, INNER1, True)
    assert p3 is not p1
    # rebinding gives the same numbers as a fresh graph
    for a, b, theta in ((0.3, 0.9, -0.2), (1.7, -0.5, 1.1)):
        m = _deep_model(a, b)
        e = _population_episodes([theta])
        loss, _, _ = p3.run_meta(m, None, e, ALPHA)
        want = maml_meta_loss(m, None, e, INNER1).item()
        assert loss == pytest.approx(want, abs=1e-13)


def test_eval_episodes_are_pure():
    cfg = TaskConfig(kind="logistic2d", shots=3, query=6)
    a = eval_episodes(cfg, 4, seed=5)
    b = eval_episodes(cfg, 4, seed=5)
    c = eval_episodes(cfg, 4, seed=6)
    assert len(a) == 4
    for d1, d2 in zip(a, b):
        assert np.array_equal(d1.support_x, d2.support_x)
        assert np.array_equal(d1.query_y, d2.query_y)
    assert not np.array_equal(a[0].support_x, c[0].support_x)


def _train_cfg(**over):
    base = dict(
        model=ModelSpec(kind="deep1d"),
        inner=InnerConfig(alpha=ALPHA, steps=1),
        outer=OuterConfig(beta=0.05, meta_batch=2, iterations=6),
        task=TaskConfig(kind="regression1d", population=True),
        eval_tasks=0,
    )
    base.update(over)
    return TrainConfig(**base)


def test_meta_train_is_pure_function_of_config_and_seed():
    cfg = _train_cfg()
    r1 = meta_train(cfg, 3)
    r2 = meta_train(cfg, 3)
    r3 = meta_train(cfg, 4)
    l1 = [m["loss"] for m in r1.metrics]
    assert l1 == [m["loss"] for m in r2.metrics]
    assert l1 != [m["loss"] for m in r3.metrics]
    for p1, p2 in zip(r1.final_model.param_items(), r2.final_model.param_items()):
        assert np.array_equal(p1[1], p2[1])


def test_meta_train_task_pool_memorizes_single_task():
    cfg = _train_cfg(
        outer=OuterConfig(beta=0.05, meta_batch=2, iterations=200),
        task=TaskConfig(kind="regression1d", population=True, n_train_tasks=1),
    )
    rec = meta_train(cfg, 0)
    assert not rec.diverged
    # the fixed task is solved post-adaptation: loss hits the 0.5 floor
    assert rec.metrics[-1]["loss"] == pytest.approx(0.5, abs=1e-3)


def test_meta_train_records_trajectory_for_tiny_models():
    rec = meta_train(_train_cfg(), 1)
    assert len(rec.trajectory) == 7  # init + one point per iteration
    assert set(rec.trajectory[0]) == {"a", "b"}
    big = _train_cfg(model=ModelSpec(kind="linnet", input_dim=1, output_dim=1,
                                     hidden=(2,)),
                     task=TaskConfig(kind="regression1d", shots=4, query=4))
    big.inner = InnerConfig(alpha=0.1, steps=1)
    rec2 = meta_train(big, 1)
    assert rec2.trajectory == []


def test_meta_train_eval_cadence_and_steps():
    cfg = _train_cfg(
        outer=OuterConfig(beta=0.05, meta_batch=2, iterations=4),
        eval_tasks=3, eval_every=2, eval_steps=3,
    )
    rec = meta_train(cfg, 0)
    tests = [m for m in rec.metrics if m["phase"] == "meta-test"]
    trains = [m for m in rec.metrics if m["phase"] == "meta-train"]
    assert len(trains) == 4
    assert [m["iteration"] for m in tests] == [2, 4]
    assert all(m["step"] == 3 for m in tests)
    assert rec.final_eval is not None
    assert rec.final_eval["mse"] is not None


def test_meta_train_flags_divergence():
    cfg = _train_cfg(outer=OuterConfig(beta=1e5, meta_batch=2, iterations=5))
    rec = meta_train(cfg, 0)
    assert rec.diverged
    assert rec.divergence_step == 2
    last = rec.metrics[-1]
    assert math.isnan(last["loss"])
    assert "diverged" in last["note"]
    assert len([m for m in rec.metrics if m["phase"] == "meta-train"]) == 2
