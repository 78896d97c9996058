"""Reverse-mode automatic differentiation over dense 2-d tensors.

Every value in a graph is a row-major float64 matrix; scalars are shaped
(1, 1). Differentiation works by emitting new graph nodes for the
backward pass, so gradients are themselves graph values and can be
differentiated again to any order. That is what lets the meta-learning
engine push gradients through inner-loop updates of both model and
optimizer parameters.

The node-level primitive set is small; the richer surface ops (mse,
cross entropies, square, mean, concatenate, ...) are composites over it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from ._graph_py import (
    ADD, BCAST_COLS, BCAST_ROWS, BCAST_S, CONCAT0, EXP, LEAF, LOG, MATMUL,
    MUL, PAD0, RECIP, RELU, RESHAPE, ROWMAX, SCAL_ADD, SCAL_MUL, SIGMOID,
    SLICE0, SOFTPLUS, STEP, STOPGRAD, SUB, SUM_ALL, SUM_COLS, SUM_ROWS, TANH,
    TRANSPOSE,
)
from .errors import (
    ConfigurationError, ContractError, NumericalError, ShapeError,
    UnsupportedOpError,
)

_SCALARS = (int, float, np.integer, np.floating)


class Graph:
    """A define-by-run computation graph.

    Nodes are appended through Var arithmetic or the helpers below and
    never removed. Construction is single-owner; evaluation is lazy and
    cached, and re-evaluating the same graph is bit-deterministic.
    """

    def __init__(self, core=None):
        self._core = core if core is not None else backend.GraphCore()
        # per-node metadata mirrors, used by the differentiation rules
        self.op = []
        self.pa = []
        self.pb = []
        self.i0 = []
        self.i1 = []
        self.fattr = []
        self.shape = []

    def __len__(self):
        return len(self.op)

    def _node(self, op, a, b, i0, i1, f, r, c):
        nid = self._core.add(op, a, b, i0, i1, f, r, c)
        self.op.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.i0.append(i0)
        self.i1.append(i1)
        self.fattr.append(f)
        self.shape.append((r, c))
        return Var(self, nid)

    def leaf(self, shape):
        """New unbound parameter node of the given (rows, cols) shape."""
        r, c = _as_shape(shape)
        return self._node(LEAF, -1, -1, 0, 0, 0.0, r, c)

    def constant(self, value):
        """New leaf bound to a fixed value."""
        arr = _as_matrix(value)
        v = self.leaf(arr.shape)
        self._core.bind(v.nid, arr)
        return v

    def bind(self, var, value):
        """(Re)bind a leaf; downstream values are recomputed on demand."""
        if self.op[var.nid] != LEAF:
            raise ContractError(f"node {var.nid} is not a leaf")
        arr = _as_matrix(value)
        if arr.shape != self.shape[var.nid]:
            raise ShapeError(
                f"bind shape {arr.shape} does not match leaf shape "
                f"{self.shape[var.nid]}"
            )
        self._core.bind(var.nid, arr)

    def value(self, var):
        return self._core.value(var.nid)


class Var:
    """Handle to one graph node. Supports float-style arithmetic."""

    __slots__ = ("graph", "nid")

    # Defer mixed ndarray-Var arithmetic to our reflected operators
    # instead of letting numpy broadcast over the Var object.
    __array_ufunc__ = None

    def __init__(self, graph, nid):
        self.graph = graph
        self.nid = nid

    @property
    def shape(self):
        return self.graph.shape[self.nid]

    @property
    def value(self):
        """Evaluate and return a copy of this node's value."""
        return np.array(self.graph.value(self), dtype=np.float64)

    def item(self):
        v = self.graph.value(self)
        if v.shape != (1, 1):
            raise ContractError(f"item() on non-scalar shape {v.shape}")
        return float(v[0, 0])

    def _coerce(self, other):
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise ContractError("operands belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        if isinstance(other, _SCALARS):
            r, c = self.shape
            return self.graph._node(SCAL_ADD, self.nid, -1, 0, 0, float(other), r, c)
        other = self._coerce(other)
        _check_same(self, other, "add")
        r, c = self.shape
        return self.graph._node(ADD, self.nid, other.nid, 0, 0, 0.0, r, c)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, _SCALARS):
            return self + (-float(other))
        other = self._coerce(other)
        _check_same(self, other, "sub")
        r, c = self.shape
        return self.graph._node(SUB, self.nid, other.nid, 0, 0, 0.0, r, c)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, _SCALARS):
            r, c = self.shape
            return self.graph._node(SCAL_MUL, self.nid, -1, 0, 0, float(other), r, c)
        other = self._coerce(other)
        _check_same(self, other, "mul")
        r, c = self.shape
        return self.graph._node(MUL, self.nid, other.nid, 0, 0, 0.0, r, c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _SCALARS):
            return self * (1.0 / float(other))
        return self * recip(self._coerce(other))

    def __rtruediv__(self, other):
        return recip(self) * other

    def __neg__(self):
        return self * -1.0

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ContractError("only non-negative integer powers are supported")
        if n == 0:
            return self * 0.0 + 1.0
        out = self
        for _ in range(int(n) - 1):
            out = out * self
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        (r, k1), (k2, c) = self.shape, other.shape
        if k1 != k2:
            raise ShapeError(f"matmul inner dims differ: {self.shape} vs {other.shape}")
        return self.graph._node(MATMUL, self.nid, other.nid, 0, 0, 0.0, r, c)

    def __rmatmul__(self, other):
        return self._coerce(other) @ self

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.shape})"


def _as_shape(shape):
    r, c = int(shape[0]), int(shape[1])
    if r <= 0 or c <= 0:
        raise ShapeError(f"non-positive shape {(r, c)}")
    return r, c


def _as_matrix(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"values must be at most 2-d, got shape {arr.shape}")
    return arr


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitive wrappers


def _unary(op, v, r=None, c=None):
    rr, cc = v.shape if r is None else (r, c)
    return v.graph._node(op, v.nid, -1, 0, 0, 0.0, rr, cc)


def exp(v):
    return _unary(EXP, v)


def log(v):
    return _unary(LOG, v)


def tanh(v):
    return _unary(TANH, v)


def sigmoid(v):
    return _unary(SIGMOID, v)


def relu(v):
    return _unary(RELU, v)


def step(v):
    """Heaviside step, 1 where v > 0 else 0. Derivative defined as 0."""
    return _unary(STEP, v)


def softplus(v):
    return _unary(SOFTPLUS, v)


def recip(v):
    return _unary(RECIP, v)


def stopgrad(v):
    """Identity in the forward pass, blocks gradient flow backward."""
    return _unary(STOPGRAD, v)


def square(v):
    return v * v


def transpose(v):
    r, c = v.shape
    return v.graph._node(TRANSPOSE, v.nid, -1, 0, 0, 0.0, c, r)


def sum_(v):
    return v.graph._node(SUM_ALL, v.nid, -1, 0, 0, 0.0, 1, 1)


def mean(v):
    r, c = v.shape
    return sum_(v) * (1.0 / (r * c))


def sum_rows(v):
    r, c = v.shape
    return v.graph._node(SUM_ROWS, v.nid, -1, 0, 0, 0.0, 1, c)


def sum_cols(v):
    r, c = v.shape
    return v.graph._node(SUM_COLS, v.nid, -1, 0, 0, 0.0, r, 1)


def bcast_scalar(v, r, c):
    if v.shape != (1, 1):
        raise ShapeError(f"bcast_scalar needs a (1, 1) input, got {v.shape}")
    return v.graph._node(BCAST_S, v.nid, -1, r, c, 0.0, r, c)


def bcast_rows(v, r):
    if v.shape[0] != 1:
        raise ShapeError(f"bcast_rows needs a (1, c) input, got {v.shape}")
    return v.graph._node(BCAST_ROWS, v.nid, -1, r, 0, 0.0, r, v.shape[1])


def bcast_cols(v, c):
    if v.shape[1] != 1:
        raise ShapeError(f"bcast_cols needs an (r, 1) input, got {v.shape}")
    return v.graph._node(BCAST_COLS, v.nid, -1, 0, c, 0.0, v.shape[0], c)


def reshape(v, r, c):
    r0, c0 = v.shape
    if r0 * c0 != r * c:
        raise ShapeError(f"cannot reshape {v.shape} to {(r, c)}")
    return v.graph._node(RESHAPE, v.nid, -1, r, c, 0.0, r, c)


def vec(v):
    """Column-vectorize in row-major order, (r, c) -> (r*c, 1)."""
    r, c = v.shape
    return reshape(v, r * c, 1)


def rowmax_detached(v):
    """Per-row max, treated as a constant under differentiation.

    Used to stabilize softmax: subtracting any constant from logits
    leaves the cross-entropy and its gradient unchanged.
    """
    r, c = v.shape
    return v.graph._node(ROWMAX, v.nid, -1, 0, 0, 0.0, r, 1)


def concat(vs, axis=0):
    if len(vs) == 0:
        raise ContractError("concat of an empty list")
    if axis == 1:
        return transpose(concat([transpose(v) for v in vs], axis=0))
    if axis != 0:
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    out = vs[0]
    for v in vs[1:]:
        if v.shape[1] != out.shape[1]:
            raise ShapeError(
                f"concat: column counts {out.shape} and {v.shape} differ"
            )
        r = out.shape[0] + v.shape[0]
        out = out.graph._node(CONCAT0, out.nid, v.nid, 0, 0, 0.0, r, out.shape[1])
    return out


def slice_rows(v, start, stop):
    r, c = v.shape
    if not (0 <= start < stop <= r):
        raise ShapeError(f"row slice [{start}:{stop}) out of range for {v.shape}")
    return v.graph._node(SLICE0, v.nid, -1, start, stop, 0.0, stop - start, c)


def _pad_rows(v, before, after):
    r, c = v.shape
    return v.graph._node(PAD0, v.nid, -1, before, after, 0.0, before + r + after, c)


# ---------------------------------------------------------------------------
# loss composites


def mse(pred, target):
    """Mean squared error, mean((target - pred)^2) over all entries."""
    if not isinstance(target, Var):
        target = pred.graph.constant(target)
    d = target - pred
    return mean(d * d)


def sigmoid_cross_entropy(logits, labels):
    """Binary cross entropy with logits; labels are 0/1, shape (n, 1).

    Computed as mean(softplus(z) - y*z), which is stable for large |z|.
    """
    if not isinstance(labels, Var):
        labels = logits.graph.constant(labels)
    _check_same(logits, labels, "sigmoid_cross_entropy")
    return mean(softplus(logits) - labels * logits)


def softmax_cross_entropy(logits, onehot):
    """Softmax cross entropy with logits; onehot is (n, k)."""
    if not isinstance(onehot, Var):
        onehot = logits.graph.constant(onehot)
    _check_same(logits, onehot, "softmax_cross_entropy")
    r, c = logits.shape
    shifted = logits - bcast_cols(rowmax_detached(logits), c)
    lse = log(sum_cols(exp(shifted)))
    picked = sum_cols(onehot * shifted)
    return mean(lse - picked)


# ---------------------------------------------------------------------------
# differentiation


@dataclass
class GradientRequest:
    """What to differentiate: a scalar output w.r.t. an ordered wrt list."""

    output: Var
    wrt: list
    create_graph: bool = True


def _r_leaf(g, n, cot):
    return []


def _r_add(g, n, cot):
    return [(g.pa[n], cot), (g.pb[n], cot)]


def _r_sub(g, n, cot):
    return [(g.pa[n], cot), (g.pb[n], cot * -1.0)]


def _r_mul(g, n, cot):
    va, vb = Var(g, g.pa[n]), Var(g, g.pb[n])
    return [(g.pa[n], vb * cot), (g.pb[n], va * cot)]


def _r_scal_mul(g, n, cot):
    return [(g.pa[n], cot * g.fattr[n])]


def _r_scal_add(g, n, cot):
    return [(g.pa[n], cot)]


def _r_matmul(g, n, cot):
    va, vb = Var(g, g.pa[n]), Var(g, g.pb[n])
    return [(g.pa[n], cot @ transpose(vb)), (g.pb[n], transpose(va) @ cot)]


def _r_transpose(g, n, cot):
    return [(g.pa[n], transpose(cot))]


def _r_sum_all(g, n, cot):
    r, c = g.shape[g.pa[n]]
    return [(g.pa[n], bcast_scalar(cot, r, c))]


def _r_sum_rows(g, n, cot):
    r = g.shape[g.pa[n]][0]
    return [(g.pa[n], bcast_rows(cot, r))]


def _r_sum_cols(g, n, cot):
    c = g.shape[g.pa[n]][1]
    return [(g.pa[n], bcast_cols(cot, c))]


def _r_bcast_s(g, n, cot):
    return [(g.pa[n], sum_(cot))]


def _r_bcast_rows(g, n, cot):
    return [(g.pa[n], sum_rows(cot))]


def _r_bcast_cols(g, n, cot):
    return [(g.pa[n], sum_cols(cot))]


def _r_reshape(g, n, cot):
    r, c = g.shape[g.pa[n]]
    return [(g.pa[n], reshape(cot, r, c))]


def _r_exp(g, n, cot):
    return [(g.pa[n], Var(g, n) * cot)]


def _r_log(g, n, cot):
    return [(g.pa[n], recip(Var(g, g.pa[n])) * cot)]


def _r_tanh(g, n, cot):
    y = Var(g, n)
    return [(g.pa[n], (y * y * -1.0 + 1.0) * cot)]


def _r_sigmoid(g, n, cot):
    y = Var(g, n)
    return [(g.pa[n], y * (y * -1.0 + 1.0) * cot)]


def _r_relu(g, n, cot):
    return [(g.pa[n], step(Var(g, g.pa[n])) * cot)]


def _r_zero(g, n, cot):
    return []


def _r_softplus(g, n, cot):
    return [(g.pa[n], sigmoid(Var(g, g.pa[n])) * cot)]


def _r_recip(g, n, cot):
    y = Var(g, n)
    return [(g.pa[n], y * y * cot * -1.0)]


def _r_concat0(g, n, cot):
    ra = g.shape[g.pa[n]][0]
    rb = g.shape[g.pb[n]][0]
    return [
        (g.pa[n], slice_rows(cot, 0, ra)),
        (g.pb[n], slice_rows(cot, ra, ra + rb)),
    ]


def _r_slice0(g, n, cot):
    ra = g.shape[g.pa[n]][0]
    return [(g.pa[n], _pad_rows(cot, g.i0[n], ra - g.i1[n]))]


def _r_pad0(g, n, cot):
    ra = g.shape[g.pa[n]][0]
    return [(g.pa[n], slice_rows(cot, g.i0[n], g.i0[n] + ra))]


# The registry is deliberately a mutable module-level table: the
# verification suite's negative control swaps a rule out to prove the
# finite-difference checks catch a wrong derivative.
BACKWARD_RULES = {
    LEAF: _r_leaf,
    ADD: _r_add,
    SUB: _r_sub,
    MUL: _r_mul,
    SCAL_MUL: _r_scal_mul,
    SCAL_ADD: _r_scal_add,
    MATMUL: _r_matmul,
    TRANSPOSE: _r_transpose,
    SUM_ALL: _r_sum_all,
    SUM_ROWS: _r_sum_rows,
    SUM_COLS: _r_sum_cols,
    BCAST_S: _r_bcast_s,
    BCAST_ROWS: _r_bcast_rows,
    BCAST_COLS: _r_bcast_cols,
    RESHAPE: _r_reshape,
    EXP: _r_exp,
    LOG: _r_log,
    TANH: _r_tanh,
    SIGMOID: _r_sigmoid,
    RELU: _r_relu,
    STEP: _r_zero,
    SOFTPLUS: _r_softplus,
    RECIP: _r_recip,
    STOPGRAD: _r_zero,
    ROWMAX: _r_zero,
    CONCAT0: _r_concat0,
    SLICE0: _r_slice0,
    PAD0: _r_pad0,
}


def grad(output, wrt=None, create_graph=True):
    """Gradient nodes of a scalar output w.r.t. each entry of `wrt`.

    Accepts either (output, wrt, create_graph) or a GradientRequest.
    The returned Vars have the same shapes as their wrt entries and are
    themselves differentiable unless create_graph is False. Entries the
    output does not depend on come back as exact-zero nodes.
    """
    if isinstance(output, GradientRequest):
        req = output
        output, wrt, create_graph = req.output, req.wrt, req.create_graph
    if wrt is None:
        raise ContractError("grad() needs a wrt list")
    g = output.graph
    if output.shape != (1, 1):
        raise ContractError(f"grad output must be scalar, got shape {output.shape}")
    wrt_ids = [v.nid for v in wrt]
    for v in wrt:
        if v.graph is not g:
            raise ContractError("wrt nodes belong to a different graph")
    stop = min(wrt_ids) if wrt_ids else output.nid
    wanted = set(wrt_ids)

    cot = {output.nid: g.constant(np.ones((1, 1)))}
    results = {}
    for nid in range(output.nid, stop - 1, -1):
        c = cot.pop(nid, None)
        if c is None:
            continue
        if nid in wanted:
            results[nid] = c
        rule = BACKWARD_RULES.get(g.op[nid])
        if rule is None:
            raise UnsupportedOpError(
                f"no differentiation rule registered for opcode {g.op[nid]}"
            )
        for pid, contrib in rule(g, nid, c):
            prev = cot.get(pid)
            cot[pid] = contrib if prev is None else prev + contrib

    out = []
    for v in wrt:
        got = results.get(v.nid)
        if got is None:
            got = v * 0.0
        elif got.shape != v.shape:
            raise ShapeError(
                f"gradient shape {got.shape} does not match wrt shape {v.shape}"
            )
        out.append(stopgrad(got) if not create_graph else got)
    return out


def evaluate(graph, node):
    """Forward value of a node (spec-level convenience wrapper)."""
    if isinstance(node, Var):
        return node.value
    return np.array(graph.value(Var(graph, node)), dtype=np.float64)


def finite_diff_check(f, point, step=1e-5):
    """Max relative error between autodiff and central differences.

    `f` maps a list of scalar Vars (one per coordinate of `point`) to a
    scalar Var. The analytic gradient comes from grad(); the numeric one
    from central differences with the given step, rebinding the same
    leaves. Returns max_i |analytic_i - cd_i| / (|cd_i| + 1e-12).
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    if step <= 0:
        raise ContractError("step must be positive")
    g = Graph()
    leaves = [g.leaf((1, 1)) for _ in point]
    for v, x in zip(leaves, point):
        g.bind(v, x)
    out = f(leaves)
    if not isinstance(out, Var) or out.shape != (1, 1):
        raise ContractError("f must return a scalar Var")
    analytic = [gr.item() for gr in grad(out, leaves)]

    worst = 0.0
    for i, v in enumerate(leaves):
        g.bind(v, point[i] + step)
        fp = out.item()
        g.bind(v, point[i] - step)
        fm = out.item()
        g.bind(v, point[i])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite value in FD stencil at coordinate {i}")
        cd = (fp - fm) / (2.0 * step)
        err = abs(analytic[i] - cd) / (abs(cd) + 1e-12)
        worst = max(worst, err)
    return worst
