"""Learnable gradient transformations U_xi.

Four kinds:
  identity  plain MAML, no parameters
  msgd      per-parameter diagonal scaling, U(g) = d * g
  mc        block transform L @ G @ R per tensor, no bias, xi never
            updated during adaptation
  kfo       Kronecker-factored map U(G) = L @ G @ R + b, optionally a
            stack of (L_i, R_i) pairs with an activation between pairs
            and the bias added last (depth = pairs beyond the first)

All transforms initialize to the identity map (d = 1, L = R = I, b = 0)
so meta-training starts exactly at plain MAML behavior. For the
nonlinear stack the factors are identity but the interleaved activation
makes exact U(g) = g unattainable; the exact-identity property holds
for the linear kinds.

The apply/update functions are duck-typed: they accept either numpy
arrays or graph Vars, so the same code serves concrete trajectory
checks and the differentiable inner loop.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, ShapeError

KINDS = ("identity", "msgd", "mc", "kfo")


@dataclass
class OptimizerSpec:
    """Which U_xi family to use and how it behaves in the inner loop.

    xi_adapts_inner=None resolves to the kind's default: True for kfo
    (the alternating inner updates are its defining feature), False for
    the others. mc must keep it False.
    """

    kind: str = "identity"
    depth: int = 0
    activation: str = "relu"
    xi_adapts_inner: bool = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if self.depth < 0:
            raise ConfigurationError("depth must be >= 0")
        if self.kind != "kfo" and self.depth != 0:
            raise ConfigurationError(f"depth is a kfo-only field, got kind {self.kind!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.xi_adapts_inner is None:
            self.xi_adapts_inner = self.kind == "kfo"
        if self.kind == "mc" and self.xi_adapts_inner:
            raise ContractError(
                "mc holds its parameters fixed during adaptation "
                "(xi_adapts_inner must be False)"
            )

    def to_dict(self):
        return {
            "kind": self.kind,
            "depth": self.depth,
            "activation": self.activation,
            "xi_adapts_inner": self.xi_adapts_inner,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            depth=d.get("depth", 0),
            activation=d.get("activation", "relu"),
            xi_adapts_inner=d.get("xi_adapts_inner"),
        )


@dataclass
class XiParams:
    """Per-parameter-tensor transform parameters.

    `tensors` maps a model parameter key (layer name, or name + '/b'
    for the bias row) to that entry's named factors.
    """

    spec: OptimizerSpec
    tensors: dict = field(default_factory=dict)

    def clone(self):
        return XiParams(self.spec, copy.deepcopy(self.tensors))

    def flat_items(self):
        """Deterministically ordered ((key, name), array) pairs."""
        out = []
        for key in self.tensors:
            entry = self.tensors[key]
            for name in entry:
                out.append(((key, name), entry[name]))
        return out

    def n_params(self):
        return sum(int(np.size(v)) for _, v in self.flat_items())


def _entry_names(spec):
    if spec.kind == "identity":
        return []
    if spec.kind == "msgd":
        return ["d"]
    if spec.kind == "mc":
        return ["L", "R"]
    names = []
    for i in range(spec.depth + 1):
        names += [f"L{i}", f"R{i}"]
    return names + ["b"]


def init_xi(spec, model):
    """Identity-initialized transform parameters for every model tensor."""
    tensors = {}
    if spec.kind == "identity":
        return XiParams(spec, tensors)
    for key, arr in model.param_items():
        n, m = arr.shape
        if spec.kind == "msgd":
            entry = {"d": np.ones((n, m))}
        elif spec.kind == "mc":
            entry = {"L": np.eye(n), "R": np.eye(m)}
        else:
            entry = {}
            for i in range(spec.depth + 1):
                entry[f"L{i}"] = np.eye(n)
                entry[f"R{i}"] = np.eye(m)
            entry["b"] = np.zeros((n, m))
        tensors[key] = entry
    return XiParams(spec, tensors)


def _act(x, name):
    if isinstance(x, ad.Var):
        return ad.relu(x) if name == "relu" else ad.tanh(x)
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _apply_entry(spec, entry, g):
    if spec.kind == "msgd":
        return entry["d"] * g
    if spec.kind == "mc":
        return entry["L"] @ g @ entry["R"]
    out = entry["L0"] @ g @ entry["R0"]
    for i in range(1, spec.depth + 1):
        out = entry[f"L{i}"] @ _act(out, spec.activation) @ entry[f"R{i}"]
    return out + entry["b"]


def transform(xi, grads, graph=None):
    """Apply U_xi per tensor: {key: G} -> {key: U(G)}.

    Works on numpy arrays and on graph Vars alike; with Vars the result
    is differentiable w.r.t. both the gradients and the xi factors.
    The `graph` argument is unused (kept for interface symmetry: graph
    membership travels with the Vars themselves).
    """
    spec = xi.spec
    if spec.kind == "identity":
        return dict(grads)
    out = {}
    for key, g in grads.items():
        entry = xi.tensors.get(key)
        if entry is None:
            raise ShapeError(f"no xi entry for parameter {key!r}")
        gshape = g.shape if isinstance(g, ad.Var) else np.shape(g)
        want = entry["d"].shape if spec.kind == "msgd" else (
            _dim0(entry, spec), _dim1(entry, spec))
        if tuple(gshape) != tuple(want):
            raise ShapeError(
                f"gradient shape {tuple(gshape)} does not match xi entry "
                f"shape {tuple(want)} for {key!r}"
            )
        out[key] = _apply_entry(spec, entry, g)
    return out


def _dim0(entry, spec):
    L = entry["L"] if spec.kind == "mc" else entry["L0"]
    return L.shape[0] if not isinstance(L, ad.Var) else L.shape[0]


def _dim1(entry, spec):
    R = entry["R"] if spec.kind == "mc" else entry["R0"]
    return R.shape[0] if not isinstance(R, ad.Var) else R.shape[0]


def xi_inner_update(xi, xi_grads, alpha):
    """One plain gradient step on xi: xi <- xi - alpha * grad.

    Only legal when the spec adapts xi during the inner loop; mc and
    identity reject the call. `xi_grads` mirrors the tensors layout.
    """
    if not xi.spec.xi_adapts_inner:
        raise ContractError(
            f"optimizer kind {xi.spec.kind!r} does not update xi during adaptation"
        )
    new = {}
    for key, entry in xi.tensors.items():
        gentry = xi_grads[key]
        new[key] = {name: entry[name] - alpha * gentry[name] for name in entry}
    return XiParams(xi.spec, new)


def kron_dense(L, R):
    """Dense matrix equal to G -> L @ G @ R on column-major vec(G).

    vec(L G R) = (R^T kron L) vec(G) for column-major vectorization.
    Used by the verification suite to cross-check the factored form.
    """
    return np.kron(np.asarray(R).T, np.asarray(L))
