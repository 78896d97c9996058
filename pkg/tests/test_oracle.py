"""Closed-form landscape oracle: values, derivatives, stationary points."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metagrad.errors import ContractError
from metagrad.rng import STREAM_TASK, stream_rng
from metagrad.oracle import (
    CoeffTriple,
    DeepPoint,
    bayes_accuracy_logistic2d,
    coeff_triple,
    deep_maml_grad,
    deep_maml_loss,
    deep_one_step_adapt,
    landscape_grid,
    mc_landscape,
    shallow_maml_loss,
    shallow_one_step_adapt,
    shallow_postadapt_taskloss,
    stationary_points,
)

ALPHA = 0.1


def test_deep_point_rejects_nonfinite():
    with pytest.raises(ContractError):
        DeepPoint(float("nan"), 0.0)
    with pytest.raises(ContractError):
        DeepPoint(0.0, float("inf"))


def test_coeff_triple_closed_form():
    a, b, alpha = 0.7, -1.3, 0.25
    t = coeff_triple(DeepPoint(a, b), alpha)
    ab, s = a * b, a * a + b * b
    assert t.p1 == pytest.approx(ab - alpha * s * ab + alpha**2 * ab**3)
    assert t.p2 == pytest.approx(alpha * s - 2 * alpha**2 * ab * ab)
    assert t.p3 == pytest.approx(alpha**2 * ab)
    assert isinstance(t, CoeffTriple)


def test_coeff_triple_predicts_adaptation_product():
    """a'b' after one step is exactly p1 + p2*theta + p3*theta^2."""
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=2)
        alpha = rng.uniform(0.05, 0.5)
        theta = rng.normal()
        adapted = deep_one_step_adapt((a, b), theta, alpha)
        t = coeff_triple((a, b), alpha)
        want = t.p1 + t.p2 * theta + t.p3 * theta * theta
        assert adapted.a * adapted.b == pytest.approx(want, abs=1e-12)


def test_deep_loss_special_values():
    assert deep_maml_loss(DeepPoint(0.0, 0.0), ALPHA) == pytest.approx(0.5)
    r = 1.0 / math.sqrt(ALPHA)
    for p in ((r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)):
        assert deep_maml_loss(p, ALPHA) == pytest.approx(0.0, abs=1e-15)


def test_deep_loss_matches_monte_carlo_expectation():
    """The closed form is E_theta[task loss] - 0.5 (noise term dropped)."""
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(400_000)
    theta = np.concatenate([theta, -theta])
    for a, b in ((0.3, -0.8), (1.5, 0.2), (0.0, 2.0)):
        adapted = deep_one_step_adapt((a, b), theta, ALPHA)
        emp = np.mean(0.5 * ((adapted.a * adapted.b - theta) ** 2 + 1.0))
        assert deep_maml_loss((a, b), ALPHA) + 0.5 == pytest.approx(emp, abs=5e-3)


def test_deep_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(40):
        a, b = rng.normal(size=2)
        alpha = rng.uniform(0.05, 0.4)
        da, db = deep_maml_grad((a, b), alpha)
        # doubled convention: derivatives of 2 * deep_maml_loss
        fd_a = (deep_maml_loss((a + h, b), alpha)
                - deep_maml_loss((a - h, b), alpha)) / h  # (2L)' = 2 * L'
        fd_b = (deep_maml_loss((a, b + h), alpha)
                - deep_maml_loss((a, b - h), alpha)) / h
        assert da == pytest.approx(fd_a, rel=1e-5, abs=1e-6)
        assert db == pytest.approx(fd_b, rel=1e-5, abs=1e-6)


def test_deep_grad_reference_axis_formula():
    for a in (-2.0, -0.5, 0.4, 3.0):
        da, db = deep_maml_grad((a, 0.0), ALPHA)
        assert da == pytest.approx(4 * ALPHA * a * (ALPHA * a * a - 1), abs=1e-12)
        assert db == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3),
       alpha=st.floats(0.05, 0.45))
def test_deep_loss_vectorizes(a, b, alpha):
    arr = deep_maml_loss((np.array([a, a]), np.array([b, b])), alpha)
    scalar = deep_maml_loss((a, b), alpha)
    assert np.allclose(arr, scalar)
    assert np.isfinite(scalar)


def test_stationary_points_catalog():
    pts = stationary_points(ALPHA)
    assert len(pts) == 5
    kinds = [p.kind for p in pts]
    assert kinds == ["local-max", "local-min", "local-min",
                     "local-min", "local-min"]
    origin = pts[0]
    np.testing.assert_array_equal(origin.hessian, np.diag([-0.4, -0.4]))
    r = 1.0 / math.sqrt(ALPHA)
    mins = {(round(p.coords.a, 10), round(p.coords.b, 10)) for p in pts[1:]}
    assert mins == {(round(r, 10), 0.0), (round(-r, 10), 0.0),
                    (0.0, round(r, 10)), (0.0, round(-r, 10))}
    for p in pts[1:]:
        eigs = sorted(np.diag(p.hessian))
        assert eigs == [pytest.approx(6 * ALPHA**3), pytest.approx(8 * ALPHA)]
        # every stationary point has product a*b = 0
        assert p.coords.a * p.coords.b == 0.0
    # gradients vanish there (doubled convention includes the factor 2)
    for p in pts:
        da, db = deep_maml_grad((p.coords.a, p.coords.b), ALPHA)
        assert abs(da) < 1e-12 and abs(db) < 1e-12
    with pytest.raises(ContractError):
        stationary_points(0.0)


def test_shallow_closed_forms():
    theta, alpha, c = 1.7, 0.3, -0.4
    want = (1 - alpha) ** 2 * (c - theta) ** 2
    assert shallow_postadapt_taskloss(c, theta, alpha) == pytest.approx(want)
    assert shallow_maml_loss(c, alpha) == pytest.approx(2 * (1 - alpha) ** 2 * c * c)
    assert shallow_maml_loss(c, 1.0) == 0.0
    assert shallow_one_step_adapt(0.0, theta, alpha) == pytest.approx(alpha * theta)
    got = shallow_one_step_adapt(c, theta, alpha)
    assert got == pytest.approx(c - alpha * (c - theta))


def test_shallow_expectation_pins_half_curvature():
    """E_theta[(1-a)^2 (c-theta)^2] = (1-a)^2 (c^2+1)."""
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(500_000)
    c, alpha = 0.9, 0.2
    emp = shallow_postadapt_taskloss(c, theta, alpha).mean()
    assert emp == pytest.approx((1 - alpha) ** 2 * (c * c + 1), rel=5e-3)
    assert shallow_maml_loss(c, alpha) == pytest.approx(2 * (1 - alpha) ** 2 * c * c)


def test_deep_one_step_freeze_a_solves_task():
    r = 1.0 / math.sqrt(ALPHA)
    for theta in (-2.0, -0.3, 0.0, 1.4):
        adapted = deep_one_step_adapt(DeepPoint(r, 0.0), theta, ALPHA,
                                      freeze_a=True)
        assert adapted.a == r
        assert adapted.a * adapted.b == pytest.approx(theta, abs=1e-12)


def test_landscape_grid_shapes_and_origin():
    A, B, L = landscape_grid(ALPHA, extent=(-4, 4), resolution=21)
    assert A.shape == B.shape == L.shape == (21, 21)
    i = j = 10  # center of the odd-resolution grid
    assert A[i, j] == 0.0 and B[i, j] == 0.0
    assert L[i, j] == pytest.approx(0.5)
    np.testing.assert_allclose(L, deep_maml_loss((A, B), ALPHA))


def test_mc_landscape_offset_and_errors():
    points = [(0.0, 0.0), (1.0, 1.0), (1.0 / math.sqrt(ALPHA), 0.0)]
    means, ses = mc_landscape(points, ALPHA, n_tasks=200_000, seed=0)
    assert means.shape == ses.shape == (3,)
    for i, p in enumerate(points):
        want = deep_maml_loss(p, ALPHA) + 0.5
        assert abs(means[i] - want) < 4 * ses[i] + 1e-9
    assert ses[0] > 0 and ses[1] > 0
    # at the minimum one step solves every task exactly: zero variance
    assert ses[2] == pytest.approx(0.0, abs=1e-12)
    assert means[2] == pytest.approx(0.5, abs=1e-12)


def test_mc_landscape_antithetic_contract():
    with pytest.raises(ContractError, match="even"):
        mc_landscape([(0.0, 0.0)], ALPHA, n_tasks=101, seed=0)
    # the paired estimator equals the symmetrized integrand exactly:
    # with residual r(t) = c0 + c1 t + c2 t^2 the pair average is
    # 0.5*((c0 + c2 t^2)^2 + (c1 t)^2 + 1), a function of t^2 only
    half = stream_rng(1, STREAM_TASK).standard_normal(5000)
    t = coeff_triple((2.0, 2.0), ALPHA)
    c0, c1, c2 = t.p1, t.p2 - 1.0, t.p3
    sym = 0.5 * ((c0 + c2 * half**2) ** 2 + (c1 * half) ** 2 + 1.0)
    means, ses = mc_landscape([(2.0, 2.0)], ALPHA, n_tasks=10_000, seed=1)
    assert means[0] == pytest.approx(sym.mean(), abs=1e-13)
    # and it shrinks the standard error where the odd term dominates
    _, plain_ses = mc_landscape([(2.0, 2.0)], ALPHA, n_tasks=10_000,
                                seed=1, antithetic=False)
    assert ses[0] < 0.6 * plain_ses[0]


def test_mc_landscape_is_pure_in_seed():
    pts = [(0.5, -0.5)]
    m1, s1 = mc_landscape(pts, ALPHA, n_tasks=1000, seed=9)
    m2, s2 = mc_landscape(pts, ALPHA, n_tasks=1000, seed=9)
    m3, _ = mc_landscape(pts, ALPHA, n_tasks=1000, seed=10)
    assert m1[0] == m2[0] and s1[0] == s2[0]
    assert m1[0] != m3[0]


def test_bayes_accuracy_band():
    acc = bayes_accuracy_logistic2d(400_000, seed=0)
    assert 0.68 < acc < 0.71
    assert bayes_accuracy_logistic2d(1000, seed=3) == \
        bayes_accuracy_logistic2d(1000, seed=3)
