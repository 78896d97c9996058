"""Closed-form results for the 1D regression MAML landscapes.

Tasks are y = theta*x + noise with theta ~ N(0,1), x ~ N(0,1), unit
noise. The shallow model predicts c*x, the deep one a*b*x; adaptation
is one population-gradient step with rate alpha. Everything here is
independent of the autodiff stack so it can serve as its oracle.

Scaling conventions (deliberate, self-consistent set):
  * deep_maml_loss carries a 1/2 prefactor, so the origin evaluates to
    0.5 and the four minima to 0.
  * deep_maml_grad and the stationary-point Hessians use the doubled
    convention, i.e. they are exact derivatives of 2*deep_maml_loss.
    This keeps the reference values d/da|_{b=0} = 4*alpha*a*(alpha*a^2
    - 1), H(origin) = -4*alpha*I and H(minimum) = diag(8*alpha,
    6*alpha^3) self-consistent.
  * shallow_maml_loss reports the doubled curvature 2*(1-alpha)^2*c^2;
    the raw task average E_theta[shallow_postadapt_taskloss] has half
    that curvature (plus a constant), which the tests pin explicitly.

All scalar functions are duck-typed: they accept floats, numpy arrays
(vectorized) or graph Vars (differentiable).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import STREAM_TASK, stream_rng


@dataclass
class DeepPoint:
    """A point (a, b) of the deep model's parameter plane."""

    a: object
    b: object

    def __post_init__(self):
        for v in (self.a, self.b):
            if isinstance(v, (int, float)) and not math.isfinite(v):
                raise ContractError(f"DeepPoint coordinates must be finite, got {v!r}")


@dataclass
class CoeffTriple:
    """Polynomial coefficients of the post-adaptation product.

    After one both-parameter step at task theta, the effective
    coefficient is a'b' = p1 + p2*theta + p3*theta^2 with
      p1 = ab - alpha*(a^2+b^2)*ab + alpha^2*a^3*b^3
      p2 = alpha*(a^2+b^2) - 2*alpha^2*a^2*b^2
      p3 = alpha^2*ab
    """

    p1: object
    p2: object
    p3: object


@dataclass
class StationaryPoint:
    coords: DeepPoint
    kind: str  # "local-max" | "local-min"
    hessian: np.ndarray


def _ab(p):
    if isinstance(p, DeepPoint):
        return p.a, p.b
    a, b = p
    return a, b


def coeff_triple(p, alpha):
    a, b = _ab(p)
    ab = a * b
    s = a * a + b * b
    p1 = ab - alpha * s * ab + alpha**2 * ab * ab * ab
    p2 = alpha * s - 2.0 * alpha**2 * ab * ab
    p3 = alpha**2 * ab
    return CoeffTriple(p1, p2, p3)


def shallow_postadapt_taskloss(c, theta, alpha):
    """Task loss after one adaptation step of the shallow model.

    Returns (1-alpha)^2 * (c-theta)^2; the task-noise constant is
    dropped. At alpha=1 adaptation lands on the optimum for every c,
    so the returned value is 0 everywhere.
    """
    d = c - theta
    return (1.0 - alpha) ** 2 * d * d


def shallow_maml_loss(c, alpha):
    """Shallow population meta-loss, doubled-curvature convention.

    Returns 2*(1-alpha)^2*c^2 (minimizer c=0). The expectation of
    shallow_postadapt_taskloss over theta ~ N(0,1) is
    (1-alpha)^2*(c^2+1), i.e. half this curvature plus a constant.
    """
    return 2.0 * (1.0 - alpha) ** 2 * c * c


def shallow_one_step_adapt(c, theta_new, alpha):
    """c <- c - alpha*(c - theta); from c=0 this gives alpha*theta."""
    return c - alpha * (c - theta_new)


def deep_maml_loss(p, alpha):
    """Deep population meta-loss (1/2 prefactor, noise constant dropped).

    0.5*(1 + p1^2 + p2^2 + 3*p3^2 + 2*p1*p3 - 2*p2): 0.5 at the
    origin, 0 at the four minima (+-1/sqrt(alpha), 0), (0,
    +-1/sqrt(alpha)).
    """
    t = coeff_triple(p, alpha)
    p1, p2, p3 = t.p1, t.p2, t.p3
    return 0.5 * (1.0 + p1 * p1 + p2 * p2 + 3.0 * p3 * p3 + 2.0 * p1 * p3 - 2.0 * p2)


def deep_maml_grad(p, alpha):
    """Gradient (da, db) in the doubled convention (of 2*deep_maml_loss).

    Chain rule through (p1, p2, p3); reproduces the reference specific
    case d/da|_{b=0} = 4*alpha*a*(alpha*a^2 - 1) and the stationary
    Hessians -4*alpha*I and diag(8*alpha, 6*alpha^3).
    """
    a, b = _ab(p)
    t = coeff_triple(p, alpha)
    dL1 = 2.0 * t.p1 + 2.0 * t.p3
    dL2 = 2.0 * t.p2 - 2.0
    dL3 = 6.0 * t.p3 + 2.0 * t.p1
    a2, b2 = a * a, b * b
    dp1_da = b - alpha * (3.0 * a2 + b2) * b + 3.0 * alpha**2 * a2 * b2 * b
    dp1_db = a - alpha * (a2 + 3.0 * b2) * a + 3.0 * alpha**2 * a2 * a * b2
    dp2_da = 2.0 * alpha * a - 4.0 * alpha**2 * a * b2
    dp2_db = 2.0 * alpha * b - 4.0 * alpha**2 * a2 * b
    dp3_da = alpha**2 * b
    dp3_db = alpha**2 * a
    da = dL1 * dp1_da + dL2 * dp2_da + dL3 * dp3_da
    db = dL1 * dp1_db + dL2 * dp2_db + dL3 * dp3_db
    return da, db


def stationary_points(alpha):
    """The five stationary points of the deep landscape, with Hessians.

    The origin is a local maximum with Hessian -4*alpha*I; the four
    minima sit at (+-1/sqrt(alpha), 0) and (0, +-1/sqrt(alpha)) with
    Hessians diag(8*alpha, 6*alpha^3) and diag(6*alpha^3, 8*alpha).
    The product a*b is zero at every one of them.
    """
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    r = 1.0 / math.sqrt(alpha)
    h_max = np.diag([-4.0 * alpha, -4.0 * alpha])
    h_a = np.diag([8.0 * alpha, 6.0 * alpha**3])
    h_b = np.diag([6.0 * alpha**3, 8.0 * alpha])
    points = [
        StationaryPoint(DeepPoint(0.0, 0.0), _kind(h_max), h_max),
        StationaryPoint(DeepPoint(r, 0.0), _kind(h_a), h_a),
        StationaryPoint(DeepPoint(-r, 0.0), _kind(h_a), h_a),
        StationaryPoint(DeepPoint(0.0, r), _kind(h_b), h_b),
        StationaryPoint(DeepPoint(0.0, -r), _kind(h_b), h_b),
    ]
    return points


def _kind(hessian):
    eigs = np.linalg.eigvalsh(hessian)
    if np.all(eigs > 0):
        return "local-min"
    if np.all(eigs < 0):
        return "local-max"
    return "saddle"


def deep_one_step_adapt(p, theta_new, alpha, freeze_a=False):
    """One population-gradient adaptation step at task theta_new.

    Both-parameter update: a' = a - alpha*b*(ab - theta), b' = b -
    alpha*a*(ab - theta), applied simultaneously from the old values.
    With freeze_a, only b moves; from a = 1/sqrt(alpha) that single
    step solves the task exactly (a*b' = theta_new).
    """
    a, b = _ab(p)
    resid = a * b - theta_new
    b_new = b - alpha * a * resid
    a_new = a if freeze_a else a - alpha * b * resid
    return DeepPoint(a_new, b_new)


def landscape_grid(alpha, extent=(-4.0, 4.0), resolution=41):
    """(A, B, L) meshgrid arrays of deep_maml_loss over a square grid."""
    lo, hi = extent
    axis = np.linspace(lo, hi, resolution)
    A, B = np.meshgrid(axis, axis, indexing="ij")
    return A, B, deep_maml_loss((A, B), alpha)


def mc_landscape(points, alpha, n_tasks, seed, antithetic=True):
    """Monte Carlo population meta-loss of the deep model per point.

    For each (a, b) in `points`, samples theta ~ N(0,1), applies one
    both-parameter adaptation step, and averages the population loss
    0.5*((a'b' - theta)^2 + 1). Returns (means, standard_errors).
    Against deep_maml_loss the mean carries a constant offset of +0.5
    (the retained noise term). Antithetic pairing (theta, -theta)
    cancels the odd-order fluctuation exactly.
    """
    rng = stream_rng(seed, STREAM_TASK)
    if antithetic:
        if n_tasks % 2:
            raise ContractError("antithetic sampling needs an even n_tasks")
        half = rng.standard_normal(n_tasks // 2)
        theta = np.concatenate([half, -half])
    else:
        theta = rng.standard_normal(n_tasks)
    means = np.empty(len(points))
    ses = np.empty(len(points))
    for i, (a, b) in enumerate(points):
        adapted = deep_one_step_adapt((a, b), theta, alpha)
        per_task = 0.5 * ((adapted.a * adapted.b - theta) ** 2 + 1.0)
        if antithetic:
            per_task = 0.5 * (per_task[: n_tasks // 2] + per_task[n_tasks // 2:])
        means[i] = per_task.mean()
        ses[i] = per_task.std(ddof=1) / math.sqrt(per_task.size)
    return means, ses


def bayes_accuracy_logistic2d(n_points, seed, dim=2):
    """Monte Carlo Bayes accuracy of the binary task family.

    The optimal classifier predicts the majority side of sigma(x.theta);
    its accuracy is E[max(sigma, 1-sigma)] over theta ~ N(0, I) and
    x ~ N(0, I).
    """
    rng = stream_rng(seed, STREAM_TASK)
    theta = rng.standard_normal((n_points, dim))
    x = rng.standard_normal((n_points, dim))
    z = np.einsum("ij,ij->i", x, theta)
    p = 1.0 / (1.0 + np.exp(-np.abs(z)))
    return float(p.mean())
