"""Pure-numpy evaluation backend for the computation graph.

Nodes live in flat parallel arrays (opcode, parent ids, int/float
attributes, shape). Values are cached per node; `run_from` re-evaluates
the suffix of the graph starting at the lowest invalidated node, which
makes repeated evaluate/bind cycles cheap. Semantics here are the
reference; the compiled backend in ``_graph_fast`` mirrors them.
"""

import numpy as np

from .errors import ConfigurationError

# Opcodes shared by both backends.
LEAF = 0
ADD = 1
SUB = 2
MUL = 3
SCAL_MUL = 4
SCAL_ADD = 5
MATMUL = 6
TRANSPOSE = 7
SUM_ALL = 8
SUM_ROWS = 9
SUM_COLS = 10
BCAST_S = 11
BCAST_ROWS = 12
BCAST_COLS = 13
RESHAPE = 14
EXP = 15
LOG = 16
TANH = 17
SIGMOID = 18
RELU = 19
STEP = 20
SOFTPLUS = 21
RECIP = 22
STOPGRAD = 23
ROWMAX = 24
CONCAT0 = 25
SLICE0 = 26
PAD0 = 27

N_OPS = 28


class GraphCore:
    """Append-only node store plus a forward evaluator."""

    def __init__(self):
        self.op = []
        self.pa = []
        self.pb = []
        self.i0 = []
        self.i1 = []
        self.fattr = []
        self.rows = []
        self.cols = []
        self._vals = []
        self._clean = 0  # nodes [0, _clean) have valid cached values

    def __len__(self):
        return len(self.op)

    def add(self, op, a, b, i0, i1, f, r, c):
        """Append a node and return its id. Shape checking is done by the caller."""
        nid = len(self.op)
        self.op.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.i0.append(i0)
        self.i1.append(i1)
        self.fattr.append(f)
        self.rows.append(r)
        self.cols.append(c)
        self._vals.append(None)
        return nid

    def bind(self, nid, arr):
        """Set a leaf's value and invalidate everything downstream of it."""
        flat = np.ascontiguousarray(arr, dtype=np.float64).reshape(
            self.rows[nid], self.cols[nid]
        )
        self._vals[nid] = flat.copy()
        if nid < self._clean:
            self._clean = nid
        # a freshly bound leaf itself is valid
        if self._clean == nid:
            self._clean = nid + 1

    def value(self, nid):
        """Forward value of node `nid`, evaluating lazily. Do not mutate."""
        if nid >= self._clean:
            self._run_from(self._clean, nid + 1)
            self._clean = nid + 1
        return self._vals[nid]

    def run_all(self):
        self._run_from(self._clean, len(self.op))
        self._clean = len(self.op)

    def _run_from(self, start, stop):
        op, pa, pb = self.op, self.pa, self.pb
        i0, i1, fattr = self.i0, self.i1, self.fattr
        vals = self._vals
        for n in range(start, stop):
            k = op[n]
            if k == LEAF:
                if vals[n] is None:
                    raise ConfigurationError(f"unbound parameter at node {n}")
                continue
            a = vals[pa[n]]
            if k == ADD:
                v = a + vals[pb[n]]
            elif k == SUB:
                v = a - vals[pb[n]]
            elif k == MUL:
                v = a * vals[pb[n]]
            elif k == SCAL_MUL:
                v = a * fattr[n]
            elif k == SCAL_ADD:
                v = a + fattr[n]
            elif k == MATMUL:
                v = a @ vals[pb[n]]
            elif k == TRANSPOSE:
                v = np.ascontiguousarray(a.T)
            elif k == SUM_ALL:
                v = a.sum().reshape(1, 1)
            elif k == SUM_ROWS:
                v = a.sum(axis=0, keepdims=True)
            elif k == SUM_COLS:
                v = a.sum(axis=1, keepdims=True)
            elif k == BCAST_S:
                v = np.full((i0[n], i1[n]), a[0, 0])
            elif k == BCAST_ROWS:
                v = np.repeat(a, i0[n], axis=0)
            elif k == BCAST_COLS:
                v = np.repeat(a, i1[n], axis=1)
            elif k == RESHAPE:
                v = a.reshape(i0[n], i1[n]).copy()
            elif k == EXP:
                v = np.exp(a)
            elif k == LOG:
                v = np.log(a)
            elif k == TANH:
                v = np.tanh(a)
            elif k == SIGMOID:
                v = _sigmoid(a)
            elif k == RELU:
                v = np.where(a > 0.0, a, 0.0)
            elif k == STEP:
                v = (a > 0.0).astype(np.float64)
            elif k == SOFTPLUS:
                v = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
            elif k == RECIP:
                v = 1.0 / a
            elif k == STOPGRAD:
                v = a
            elif k == ROWMAX:
                v = a.max(axis=1, keepdims=True)
            elif k == CONCAT0:
                v = np.concatenate([a, vals[pb[n]]], axis=0)
            elif k == SLICE0:
                v = a[i0[n]:i1[n]].copy()
            elif k == PAD0:
                v = np.zeros((i0[n] + a.shape[0] + i1[n], a.shape[1]))
                v[i0[n]:i0[n] + a.shape[0]] = a
            else:
                raise ConfigurationError(f"unknown opcode {k}")
            vals[n] = v


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
