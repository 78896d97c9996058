"""Model zoo for the synthetic studies.

Shallow/deep 1D regressors, binary/multinomial logistic regression,
bias-free linear networks (LinNet), and small MLPs. Models are plain
value objects holding numpy parameter tensors plus per-layer freeze
flags; the forward pass is expressed over graph Vars so the engine can
differentiate through it.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, ShapeError
from .rng import STREAM_INIT, stream_rng

KINDS = ("shallow1d", "deep1d", "logistic", "linnet", "mlp")


@dataclass
class ModelSpec:
    """Architecture description.

    kind: shallow1d | deep1d | logistic | linnet | mlp
    hidden: widths of intermediate linear layers (linnet/mlp)
    activation: none | relu | tanh (linnet forces none)
    biases: None picks the kind's default (logistic/mlp yes, others no)
    """

    kind: str = "shallow1d"
    input_dim: int = 1
    output_dim: int = 1
    hidden: tuple = ()
    activation: str = "none"
    biases: bool = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h <= 0 for h in self.hidden):
            raise ConfigurationError(f"zero-width layer in hidden={self.hidden}")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigurationError("input_dim and output_dim must be positive")
        if self.kind in ("shallow1d", "deep1d"):
            if self.input_dim != 1 or self.output_dim != 1 or self.hidden:
                raise ConfigurationError(f"{self.kind} is a scalar model")
        if self.kind == "linnet":
            if not self.hidden:
                raise ConfigurationError("linnet requires a nonempty hidden list")
            if self.activation not in ("none",):
                raise ConfigurationError("linnet layers are linear (activation none)")
        if self.kind == "mlp" and self.activation == "none":
            self.activation = "relu"
        if self.activation not in ("none", "relu", "tanh"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.biases is None:
            self.biases = self.kind in ("logistic", "mlp")

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "biases": self.biases,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            input_dim=d["input_dim"],
            output_dim=d["output_dim"],
            hidden=tuple(d.get("hidden", ())),
            activation=d.get("activation", "none"),
            biases=d.get("biases"),
        )


@dataclass
class Layer:
    """One named parameter group: a weight matrix and an optional bias row."""

    name: str
    weight: np.ndarray
    bias: np.ndarray = None
    frozen: bool = False

    def n_params(self):
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class Model:
    spec: ModelSpec
    layers: list = field(default_factory=list)

    def clone(self):
        return copy.deepcopy(self)

    def layer_names(self):
        return [l.name for l in self.layers]

    def get_layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise ContractError(
            f"unknown layer {name!r}; valid names: {self.layer_names()}"
        )

    def n_params(self):
        return sum(l.n_params() for l in self.layers)

    def param_items(self):
        """Flat (key, array) pairs; bias keys carry a '/b' suffix."""
        out = []
        for l in self.layers:
            out.append((l.name, l.weight))
            if l.bias is not None:
                out.append((l.name + "/b", l.bias))
        return out

    def param_values(self):
        return {k: v.copy() for k, v in self.param_items()}

    def set_param_values(self, values):
        for l in self.layers:
            l.weight = np.array(values[l.name], dtype=np.float64).reshape(l.weight.shape)
            if l.bias is not None:
                key = l.name + "/b"
                l.bias = np.array(values[key], dtype=np.float64).reshape(l.bias.shape)

    def freeze_mask(self):
        return [l.frozen for l in self.layers]


def _layer_dims(spec):
    """(name, in, out, has_bias) for each weight layer of the spec."""
    if spec.kind == "shallow1d":
        return [("c", 1, 1, False)]
    if spec.kind == "deep1d":
        return [("a", 1, 1, False), ("b", 1, 1, False)]
    if spec.kind == "logistic":
        return [("w", spec.input_dim, spec.output_dim, spec.biases)]
    dims = []
    widths = [spec.input_dim] + list(spec.hidden)
    prefix = "lin" if spec.kind == "linnet" else "fc"
    for i in range(len(spec.hidden)):
        dims.append((f"{prefix}{i + 1}", widths[i], widths[i + 1], False))
    dims.append(("clf", widths[-1], spec.output_dim, spec.biases))
    return dims


def build_model(spec, seed):
    """Initialize a model deterministically from the init stream of `seed`.

    Weights are N(0, 1/fan_in) (scalars of the 1d models are N(0, 1)),
    biases start at zero.
    """
    rng = stream_rng(seed, STREAM_INIT)
    layers = []
    for name, fan_in, fan_out, has_bias in _layer_dims(spec):
        if spec.kind in ("shallow1d", "deep1d"):
            w = rng.standard_normal((1, 1))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        bias = np.zeros((1, fan_out)) if has_bias else None
        layers.append(Layer(name, w, bias))
    return Model(spec, layers)


def param_vars(model, graph):
    """Constant graph nodes for every parameter tensor of the model."""
    return {k: graph.constant(v) for k, v in model.param_items()}


def forward(model, x, graph=None, params=None):
    """Forward pass returning the output node, shaped [batch, output_dim].

    `x` may be an ndarray (a constant node is created) or a Var. When
    `params` is given it must map param keys to Vars; otherwise the
    model's current values are baked in as constants.
    """
    if graph is None:
        if isinstance(x, ad.Var):
            graph = x.graph
        else:
            graph = ad.Graph()
    if not isinstance(x, ad.Var):
        x = graph.constant(np.asarray(x, dtype=np.float64).reshape(-1, model.spec.input_dim))
    if x.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"input shape {x.shape} does not match input_dim {model.spec.input_dim}"
        )
    if params is None:
        params = param_vars(model, graph)
    h = x
    n = x.shape[0]
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = h @ params[layer.name]
        if layer.bias is not None:
            h = h + ad.bcast_rows(params[layer.name + "/b"], n)
        if i < last and model.spec.activation != "none":
            h = ad.relu(h) if model.spec.activation == "relu" else ad.tanh(h)
    return h


def collapse_linear(model):
    """Collapse a pure-linear stack into its single equivalent matrix.

    deep1d becomes shallow1d with c = a*b; linnet becomes a logistic
    model whose weight is the ordered product of the layer matrices.
    Forward behavior is preserved; adaptation behavior is not, which is
    the point of the comparison this operation feeds.
    """
    if model.spec.kind not in ("linnet", "deep1d"):
        raise ContractError(f"cannot collapse model kind {model.spec.kind!r}")
    if model.spec.activation != "none":
        raise ContractError("cannot collapse a model with nonlinear activations")
    if model.spec.kind == "deep1d":
        a, b = model.layers[0].weight, model.layers[1].weight
        spec = ModelSpec(kind="shallow1d")
        return Model(spec, [Layer("c", a * b)])
    w = model.layers[0].weight.copy()
    for layer in model.layers[1:]:
        w = w @ layer.weight
    bias = model.layers[-1].bias
    spec = ModelSpec(
        kind="logistic",
        input_dim=model.spec.input_dim,
        output_dim=model.spec.output_dim,
        biases=bias is not None,
    )
    layers = [Layer("w", w, None if bias is None else bias.copy())]
    return Model(spec, layers)


def set_freeze(model, mask):
    """Copy of the model with the given per-layer freeze flags."""
    mask = list(mask)
    if len(mask) != len(model.layers):
        raise ContractError(
            f"mask length {len(mask)} != layer count {len(model.layers)}"
        )
    out = model.clone()
    for layer, frozen in zip(out.layers, mask):
        layer.frozen = bool(frozen)
    return out
