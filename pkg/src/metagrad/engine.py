"""Bilevel MAML engine: differentiable inner adaptation, outer meta-updates.

The inner loop follows the alternating scheme: at each step t the task
loss at theta_t is differentiated once w.r.t. both theta_t and (when the
optimizer adapts inner) xi_t; then

    xi_{t+1}    = xi_t    - alpha * d loss / d xi_t
    theta_{t+1} = theta_t - alpha * U_{xi_{t+1}}(d loss / d theta_t)

with everything emitted as graph nodes, so outer gradients differentiate
through the whole unrolled chain (second order); first_order stops the
gradient through the inner derivative terms while keeping the identity
path. Frozen layers are never updated inside the loop but stay in the
forward path, so gradients flow through their values.

Episode graphs are cached per structural signature (model/optimizer
shapes, dataset shapes, step count) and re-run by rebinding leaves,
which makes long meta-training loops cheap.

Per-task losses: regression on sampled data uses 0.5*mean((pred-y)^2);
population regression uses 0.5*((coeff - theta)^2 + 1) where coeff is
the model's effective scalar coefficient; binary classification uses
sigmoid cross entropy, k-way uses softmax cross entropy.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, DivergenceError
from .models import Model, ModelSpec, build_model
from .optimizers import OptimizerSpec, XiParams, init_xi, transform
from .rng import STREAM_DATA, STREAM_EVAL, STREAM_TASK, stream_rng
from .tasks import KINDS as TASK_KINDS
from .tasks import Dataset, draw_data, draw_task, population_dataset

DIVERGENCE_LIMIT = 1e8


@dataclass
class InnerConfig:
    """Adaptation-phase settings: rate alpha, step count T, order."""

    alpha: float
    steps: int = 1
    first_order: bool = False

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self):
        return {"alpha": self.alpha, "steps": self.steps, "first_order": self.first_order}


OUTER_RULES = ("sgd", "sgd-momentum", "adam")


@dataclass
class OuterConfig:
    """Meta-update settings: rate beta, batch size, iteration budget, rule."""

    beta: float
    meta_batch: int = 16
    iterations: int = 1000
    outer_rule: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    learn_xi: bool = True

    def __post_init__(self):
        if not (self.beta > 0):
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.meta_batch < 1:
            raise ConfigurationError("meta_batch must be >= 1")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.outer_rule not in OUTER_RULES:
            raise ConfigurationError(
                f"unknown outer_rule {self.outer_rule!r}; choose from {OUTER_RULES}"
            )

    def to_dict(self):
        return {
            "beta": self.beta, "meta_batch": self.meta_batch,
            "iterations": self.iterations, "outer_rule": self.outer_rule,
            "momentum": self.momentum, "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2, "adam_eps": self.adam_eps,
            "learn_xi": self.learn_xi,
        }


@dataclass
class AdaptationTrace:
    """Per-step record of one adaptation run.

    `params` and `support_losses` have length steps+1 (the initial state
    plus one entry per step; the last support loss is evaluated at the
    final parameters). The graph handles are populated only when adapt()
    ran with differentiable=True.
    """

    params: list
    support_losses: list
    query_loss: float
    query_accuracy: float = None
    graph: object = None
    init_vars: dict = None
    final_vars: dict = None
    xi_vars: dict = None
    query_loss_var: object = None


def _uses_xi(xi):
    return xi is not None and xi.spec.kind != "identity"


def _onehot(labels, ways):
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((idx.size, ways))
    out[np.arange(idx.size), idx] = 1.0
    return out


def _scaled(alpha, v):
    """alpha * v for a (1,1) alpha Var and an arbitrary-shape v Var."""
    r, c = v.shape
    if (r, c) == (1, 1):
        return alpha * v
    return ad.bcast_scalar(alpha, r, c) * v


def _coeff(model, params):
    """Effective scalar coefficient of a 1d linear chain (c, or a*b)."""
    if model.spec.kind not in ("shallow1d", "deep1d"):
        raise ContractError(
            "population losses are defined for shallow1d/deep1d models, "
            f"got {model.spec.kind!r}"
        )
    out = None
    for layer in model.layers:
        v = params[layer.name]
        out = v if out is None else out * v
    return out


def _forward(model, x_var, params):
    h = x_var
    n = x_var.shape[0]
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = h @ params[layer.name]
        if layer.bias is not None:
            h = h + ad.bcast_rows(params[layer.name + "/b"], n)
        if i < last and model.spec.activation != "none":
            h = ad.relu(h) if model.spec.activation == "relu" else ad.tanh(h)
    return h


def _data_loss(model, params, x_var, y_var, kind):
    pred = _forward(model, x_var, params)
    if kind == "regression1d":
        return ad.mse(pred, y_var) * 0.5, pred
    if kind == "logistic2d":
        return ad.sigmoid_cross_entropy(pred, y_var), pred
    if kind == "kway":
        return ad.softmax_cross_entropy(pred, y_var), pred
    raise ContractError(f"unknown dataset kind {kind!r}")


def _population_loss(model, params, theta_var):
    coeff = _coeff(model, params)
    d = coeff - theta_var
    return (d * d + 1.0) * 0.5, coeff


class _TaskLeaves:
    """Graph leaves holding one task's episode data."""

    def __init__(self, graph, dataset, model):
        self.population = dataset.population
        if dataset.population:
            self.theta = graph.leaf((1, 1))
            return
        self.sx = graph.leaf(dataset.support_x.shape)
        self.qx = graph.leaf(dataset.query_x.shape)
        if dataset.kind == "kway":
            ways = dataset.ways
            self.sy = graph.leaf((dataset.support_y.shape[0], ways))
            self.qy = graph.leaf((dataset.query_y.shape[0], ways))
        else:
            self.sy = graph.leaf(dataset.support_y.shape)
            self.qy = graph.leaf(dataset.query_y.shape)

    def bind(self, graph, dataset):
        if self.population:
            graph.bind(self.theta, float(dataset.theta))
            return
        graph.bind(self.sx, dataset.support_x)
        graph.bind(self.qx, dataset.query_x)
        if dataset.kind == "kway":
            graph.bind(self.sy, _onehot(dataset.support_y, dataset.ways))
            graph.bind(self.qy, _onehot(dataset.query_y, dataset.ways))
        else:
            graph.bind(self.sy, dataset.support_y)
            graph.bind(self.qy, dataset.query_y)


def _unroll_task(graph, model, alpha_var, theta0, xi0, xi_spec, leaves, kind,
                 inner, on_step=None):
    """Unrolled inner loop for one task; returns the final state.

    theta0: dict key -> Var; xi0: dict key -> {name: Var} or None.
    Returns (query_loss Var, query_pred Var, support_loss Vars,
    final theta dict, final xi dict).
    """
    frozen = {l.name for l in model.layers if l.frozen}
    adapt_keys = [k for k, _ in model.param_items() if k.split("/")[0] not in frozen]
    theta = dict(theta0)
    xi_t = dict(xi0) if xi0 is not None else None
    xi_adapts = xi_t is not None and xi_spec.xi_adapts_inner
    sup_losses = []

    def support_loss(params):
        if leaves.population:
            return _population_loss(model, params, leaves.theta)[0]
        return _data_loss(model, params, leaves.sx, leaves.sy, kind)[0]

    for t in range(inner.steps):
        loss_t = support_loss(theta)
        sup_losses.append(loss_t)
        wrt = [theta[k] for k in adapt_keys]
        xi_items = []
        if xi_adapts:
            for key in xi_t:
                for name in xi_t[key]:
                    xi_items.append((key, name))
            wrt += [xi_t[key][name] for key, name in xi_items]
        gs = ad.grad(loss_t, wrt, create_graph=True)
        if inner.first_order:
            gs = [ad.stopgrad(v) for v in gs]
        g_theta = dict(zip(adapt_keys, gs[: len(adapt_keys)]))
        if xi_adapts:
            new_xi = {key: dict(entry) for key, entry in xi_t.items()}
            for (key, name), gv in zip(xi_items, gs[len(adapt_keys):]):
                new_xi[key][name] = xi_t[key][name] - _scaled(alpha_var, gv)
            xi_t = new_xi
        if xi_t is not None:
            updates = transform(XiParams(xi_spec, xi_t), g_theta)
        else:
            updates = g_theta
        theta = dict(theta)
        for k in adapt_keys:
            theta[k] = theta[k] - _scaled(alpha_var, updates[k])
        if on_step is not None:
            on_step(t, loss_t, theta)

    sup_losses.append(support_loss(theta))
    if leaves.population:
        q_loss, q_pred = _population_loss(model, theta, leaves.theta)
    else:
        q_loss, q_pred = _data_loss(model, theta, leaves.qx, leaves.qy, kind)
    return q_loss, q_pred, sup_losses, theta, xi_t


def _check_finite(value, what, step):
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged (value {value!r})", step=step)


# ---------------------------------------------------------------------------
# cached episode programs


class EpisodeProgram:
    """A reusable unrolled meta-batch graph.

    Construction fixes the structure (model/optimizer shapes, dataset
    shapes, step count, differentiation mode); run() rebinds the leaves
    with fresh values and evaluates. `want_grads` controls whether
    meta-gradient nodes w.r.t. the initial parameters (and, with
    want_xi_grads, the optimizer parameters) are emitted.
    """

    def __init__(self, model, xi, datasets, inner, want_grads, want_xi_grads=False):
        g = ad.Graph()
        self.graph = g
        self.alpha = g.leaf((1, 1))
        self.theta_keys = [k for k, _ in model.param_items()]
        self.theta_vars = {k: g.leaf(v.shape) for k, v in model.param_items()}
        self.use_xi = _uses_xi(xi)
        self.xi_spec = xi.spec if self.use_xi else None
        self.xi_vars = None
        self.xi_index = []
        if self.use_xi:
            self.xi_vars = {}
            for key, entry in xi.tensors.items():
                self.xi_vars[key] = {n: g.leaf(np.shape(a)) for n, a in entry.items()}
                self.xi_index += [(key, n) for n in entry]
        self.leaves = [_TaskLeaves(g, d, model) for d in datasets]
        self.kind = datasets[0].kind

        q_losses, q_preds = [], []
        for lv in self.leaves:
            q_loss, q_pred, _, _, _ = _unroll_task(
                g, model, self.alpha, self.theta_vars, self.xi_vars,
                self.xi_spec, lv, self.kind, inner)
            q_losses.append(q_loss)
            q_preds.append(q_pred)
        total = q_losses[0]
        for ql in q_losses[1:]:
            total = total + ql
        self.meta_loss = total * (1.0 / len(q_losses))
        self.q_losses = q_losses
        self.q_preds = q_preds

        self.theta_grads = None
        self.xi_grads = None
        if want_grads:
            wrt = [self.theta_vars[k] for k in self.theta_keys]
            if want_xi_grads and self.use_xi:
                wrt += [self.xi_vars[key][n] for key, n in self.xi_index]
            gs = ad.grad(self.meta_loss, wrt, create_graph=False)
            self.theta_grads = dict(zip(self.theta_keys, gs[: len(self.theta_keys)]))
            if want_xi_grads and self.use_xi:
                self.xi_grads = {}
                for (key, n), gv in zip(self.xi_index, gs[len(self.theta_keys):]):
                    self.xi_grads.setdefault(key, {})[n] = gv

    def bind(self, model, xi, datasets, alpha):
        g = self.graph
        g.bind(self.alpha, alpha)
        for k, v in model.param_items():
            g.bind(self.theta_vars[k], v)
        if self.use_xi:
            for key, entry in xi.tensors.items():
                for n, a in entry.items():
                    g.bind(self.xi_vars[key][n], a)
        for lv, d in zip(self.leaves, datasets):
            lv.bind(g, d)

    def run_meta(self, model, xi, datasets, alpha):
        """(meta_loss value, theta grad arrays, xi grad arrays or None)."""
        self.bind(model, xi, datasets, alpha)
        loss = self.meta_loss.item()
        tg = {k: v.value for k, v in self.theta_grads.items()}
        xg = None
        if self.xi_grads is not None:
            xg = {key: {n: v.value for n, v in entry.items()}
                  for key, entry in self.xi_grads.items()}
        return loss, tg, xg

    def run_eval(self, model, xi, datasets, alpha):
        """(per-task query losses, per-task query prediction arrays)."""
        self.bind(model, xi, datasets, alpha)
        losses = [v.item() for v in self.q_losses]
        preds = [v.value for v in self.q_preds]
        return losses, preds


_PROGRAM_CACHE = {}


def clear_program_cache():
    _PROGRAM_CACHE.clear()


def _program_key(model, xi, datasets, inner, want_grads, want_xi_grads):
    s = model.spec
    mkey = (s.kind, s.input_dim, s.output_dim, tuple(s.hidden), s.activation,
            s.biases, tuple(model.freeze_mask()))
    if _uses_xi(xi):
        xs = xi.spec
        xkey = (xs.kind, xs.depth, xs.activation, xs.xi_adapts_inner)
    else:
        xkey = None
    dkey = tuple(
        (d.kind, bool(d.population), d.support_x.shape, d.query_x.shape, d.ways)
        for d in datasets
    )
    return (mkey, xkey, dkey, inner.steps, bool(inner.first_order),
            bool(want_grads), bool(want_xi_grads))


def _get_program(model, xi, datasets, inner, want_grads, want_xi_grads=False):
    key = _program_key(model, xi, datasets, inner, want_grads, want_xi_grads)
    prog = _PROGRAM_CACHE.get(key)
    if prog is None:
        prog = EpisodeProgram(model, xi, datasets, inner, want_grads, want_xi_grads)
        _PROGRAM_CACHE[key] = prog
    return prog


# ---------------------------------------------------------------------------
# public operations


def adapt(model, xi, task_data, cfg, differentiable=False):
    """Run the inner loop on one task; returns (model, xi, trace).

    The returned model and xi hold the adapted concrete values (frozen
    layers keep their arrays). With differentiable=True the trace also
    carries the graph and the initial/final parameter Vars, so callers
    can keep differentiating through the adaptation.
    """
    if not task_data.population and task_data.support_x.shape[0] == 0:
        raise ContractError("support set is empty")
    g = ad.Graph()
    alpha_var = g.constant(cfg.alpha)
    theta0 = {k: g.constant(v) for k, v in model.param_items()}
    xi0 = None
    if _uses_xi(xi):
        xi0 = {key: {n: g.constant(a) for n, a in entry.items()}
               for key, entry in xi.tensors.items()}

    snapshots = [{k: v.value for k, v in theta0.items()}]
    sup_values = []

    def on_step(t, loss_t, theta_t):
        val = loss_t.item()
        _check_finite(val, f"support loss at step {t}", t)
        sup_values.append(val)
        snapshots.append({k: v.value for k, v in theta_t.items()})

    xi_spec = xi.spec if _uses_xi(xi) else None
    q_loss, q_pred, sup_losses, theta_T, xi_T = _unroll_task(
        g, model, alpha_var, theta0, xi0, xi_spec, _AdhocLeaves(g, task_data),
        task_data.kind, cfg, on_step=on_step)
    final_sup = sup_losses[-1].item()
    _check_finite(final_sup, "support loss after adaptation", cfg.steps)
    sup_values.append(final_sup)
    q_val = q_loss.item()
    _check_finite(q_val, "query loss", cfg.steps)

    accuracy = None
    if not task_data.population and task_data.kind in ("logistic2d", "kway"):
        accuracy = _accuracy(q_pred.value, task_data.query_y, task_data.kind)

    out_model = model.clone()
    values = {k: v.value for k, v in theta_T.items()}
    out_model.set_param_values(values)
    out_xi = xi
    if xi_T is not None:
        out_xi = XiParams(xi.spec, {key: {n: v.value for n, v in entry.items()}
                                    for key, entry in xi_T.items()})
    trace = AdaptationTrace(
        params=snapshots, support_losses=sup_values, query_loss=q_val,
        query_accuracy=accuracy)
    if differentiable:
        trace.graph = g
        trace.init_vars = theta0
        trace.final_vars = theta_T
        trace.xi_vars = xi_T
        trace.query_loss_var = q_loss
    return out_model, out_xi, trace


class _AdhocLeaves(_TaskLeaves):
    """Task leaves bound immediately (single-use graphs)."""

    def __init__(self, graph, dataset):
        self.population = dataset.population
        if dataset.population:
            self.theta = graph.constant(float(dataset.theta))
            return
        self.sx = graph.constant(dataset.support_x)
        self.qx = graph.constant(dataset.query_x)
        if dataset.kind == "kway":
            self.sy = graph.constant(_onehot(dataset.support_y, dataset.ways))
            self.qy = graph.constant(_onehot(dataset.query_y, dataset.ways))
        else:
            self.sy = graph.constant(dataset.support_y)
            self.qy = graph.constant(dataset.query_y)


def _accuracy(pred, labels, kind):
    y = np.asarray(labels).reshape(-1)
    if kind == "logistic2d":
        if pred.shape[1] == 1:
            hat = (pred.reshape(-1) > 0).astype(np.float64)
        else:
            hat = np.argmax(pred, axis=1).astype(np.float64)
    else:
        hat = np.argmax(pred, axis=1).astype(np.float64)
    return float(np.mean(hat == y))


def build_meta_loss(graph, model, xi, tasks, cfg):
    """Unrolled mean post-adaptation query loss on an existing graph.

    Returns (loss Var, theta leaf dict, xi leaf dict or None); the
    leaves are bound to the current model/xi values and can be rebound.
    """
    if not tasks:
        raise ContractError("tasks must be nonempty")
    alpha_var = graph.constant(cfg.alpha)
    theta = {k: graph.leaf(v.shape) for k, v in model.param_items()}
    for k, v in model.param_items():
        graph.bind(theta[k], v)
    xi_vars = None
    xi_spec = None
    if _uses_xi(xi):
        xi_spec = xi.spec
        xi_vars = {}
        for key, entry in xi.tensors.items():
            xi_vars[key] = {n: graph.leaf(np.shape(a)) for n, a in entry.items()}
            for n, a in entry.items():
                graph.bind(xi_vars[key][n], a)
    total = None
    for d in tasks:
        leaves = _AdhocLeaves(graph, d)
        q_loss, _, _, _, _ = _unroll_task(
            graph, model, alpha_var, theta, xi_vars, xi_spec, leaves, d.kind, cfg)
        total = q_loss if total is None else total + q_loss
    return total * (1.0 / len(tasks)), theta, xi_vars


def maml_meta_loss(init_model, init_xi, tasks, cfg):
    """Mean post-adaptation query loss over `tasks` as a scalar node."""
    g = ad.Graph()
    loss, _, _ = build_meta_loss(g, init_model, init_xi, tasks, cfg)
    _check_finite(loss.item(), "meta-loss", cfg.steps)
    return loss


class OuterState:
    """Momentum/Adam buffers shared across meta_step calls."""

    def __init__(self):
        self.t = 0
        self.slots = {}

    def slot(self, key, like):
        buf = self.slots.get(key)
        if buf is None:
            buf = np.zeros_like(like)
            self.slots[key] = buf
        return buf


def _outer_update(cfg, state, key, value, grad):
    if cfg.outer_rule == "sgd":
        return value - cfg.beta * grad
    if cfg.outer_rule == "sgd-momentum":
        v = cfg.momentum * state.slot(("m", key), value) + grad
        state.slots[("m", key)] = v
        return value - cfg.beta * v
    m = state.slot(("m", key), value)
    v = state.slot(("v", key), value)
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
    state.slots[("m", key)] = m
    state.slots[("v", key)] = v
    mhat = m / (1.0 - cfg.adam_beta1 ** state.t)
    vhat = v / (1.0 - cfg.adam_beta2 ** state.t)
    return value - cfg.beta * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def meta_step(init_model, init_xi, tasks, inner, outer, state=None):
    """One outer update of the model (and xi) initializations.

    Returns (model, xi, metrics) with metrics carrying meta_loss,
    grad_norm and wall_ms. Outer updates touch every parameter tensor
    (freeze masks constrain the inner loop only); xi receives outer
    updates only when outer.learn_xi is set. Momentum/Adam buffers live
    in `state` (an OuterState, created fresh when omitted).
    """
    if not tasks:
        raise ContractError("tasks must be nonempty")
    if state is None:
        state = OuterState()
    t0 = time.perf_counter()
    want_xi = outer.learn_xi and _uses_xi(init_xi)
    prog = _get_program(init_model, init_xi, tasks, inner, True, want_xi)
    loss, tg, xg = prog.run_meta(init_model, init_xi, tasks, inner.alpha)
    if not math.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"meta-loss diverged (value {loss!r})", step=state.t)

    state.t += 1
    sq = 0.0
    new_values = {}
    for k, v in init_model.param_items():
        g = tg[k]
        sq += float(np.sum(g * g))
        new_values[k] = _outer_update(outer, state, ("theta", k), v, g)
    model = init_model.clone()
    model.set_param_values(new_values)

    xi = init_xi
    if want_xi and xg is not None:
        tensors = {}
        for key, entry in init_xi.tensors.items():
            tensors[key] = {}
            for n, a in entry.items():
                g = xg[key][n]
                sq += float(np.sum(g * g))
                tensors[key][n] = _outer_update(outer, state, ("xi", key, n), a, g)
        xi = XiParams(init_xi.spec, tensors)

    metrics = {
        "meta_loss": loss,
        "grad_norm": math.sqrt(sq),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    return model, xi, metrics


# ---------------------------------------------------------------------------
# evaluation and the training loop

_EVAL_CHUNK = 16


def evaluate(model, xi, datasets, inner):
    """Adapt on each episode's support set and score its query set.

    Returns a dict with the mean query loss, mean accuracy (None for
    regression), mean plain MSE (regression; squared coefficient error
    for population episodes) and the per-task lists. Divergence is not
    raised here: non-finite losses are reported as-is.
    """
    losses, accs, mses = [], [], []
    for i in range(0, len(datasets), _EVAL_CHUNK):
        chunk = datasets[i: i + _EVAL_CHUNK]
        prog = _get_program(model, xi, chunk, inner, False)
        ls, preds = prog.run_eval(model, xi, chunk, inner.alpha)
        losses += ls
        for d, pred in zip(chunk, preds):
            if d.kind in ("logistic2d", "kway"):
                accs.append(_accuracy(pred, d.query_y, d.kind))
            elif d.population:
                mses.append(float((pred[0, 0] - float(d.theta)) ** 2))
            else:
                mses.append(float(np.mean((pred - d.query_y) ** 2)))
    out = {
        "loss": float(np.mean(losses)),
        "accuracy": float(np.mean(accs)) if accs else None,
        "mse": float(np.mean(mses)) if mses else None,
        "per_task_loss": losses,
        "per_task_accuracy": accs or None,
        "per_task_mse": mses or None,
    }
    return out


@dataclass
class TaskConfig:
    """Which task distribution the run draws from.

    n_train_tasks=0 streams fresh tasks every meta-iteration; a positive
    value pre-draws that many training tasks and meta-training resamples
    episodes from this fixed pool (data stays freshly sampled), which is
    the regime where meta-overfitting becomes observable. Held-out
    evaluation always uses fresh tasks.
    """

    kind: str = "regression1d"
    shots: int = 5
    query: int = 20
    ways: int = 2
    dim: int = 2
    population: bool = False
    noiseless: bool = False
    n_train_tasks: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.population and self.kind != "regression1d":
            raise ConfigurationError("population episodes exist for regression1d only")
        if self.n_train_tasks < 0:
            raise ConfigurationError("n_train_tasks must be >= 0")

    def to_dict(self):
        return {"kind": self.kind, "shots": self.shots, "query": self.query,
                "ways": self.ways, "dim": self.dim, "population": self.population,
                "noiseless": self.noiseless, "n_train_tasks": self.n_train_tasks}


@dataclass
class TrainConfig:
    """Everything meta_train needs besides the seed."""

    model: ModelSpec
    inner: InnerConfig
    outer: OuterConfig
    task: TaskConfig = field(default_factory=TaskConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    eval_every: int = 0
    eval_tasks: int = 100
    eval_steps: int = None
    record_trajectory: bool = None

    def to_dict(self):
        return {
            "model": self.model.to_dict(), "inner": self.inner.to_dict(),
            "outer": self.outer.to_dict(), "task": self.task.to_dict(),
            "optimizer": self.optimizer.to_dict(), "eval_every": self.eval_every,
            "eval_tasks": self.eval_tasks, "eval_steps": self.eval_steps,
            "record_trajectory": self.record_trajectory,
        }


@dataclass
class ExperimentRecord:
    """Outcome of one meta_train run: metrics, trajectory, final state."""

    seed: int
    config: dict
    metrics: list
    trajectory: list
    final_model: Model
    final_xi: XiParams
    final_eval: dict = None
    diverged: bool = False
    divergence_step: int = None
    wall_ms: float = 0.0

    def to_json_dict(self):
        return {
            "seed": self.seed, "config": self.config, "metrics": self.metrics,
            "trajectory": self.trajectory, "final_eval": self.final_eval,
            "diverged": self.diverged, "divergence_step": self.divergence_step,
            "wall_ms": self.wall_ms,
        }


def _draw_episode(cfg, task_rng, data_rng):
    task = draw_task(task_rng, cfg.kind, ways=cfg.ways, dim=cfg.dim)
    if cfg.population:
        return population_dataset(task)
    return draw_data(task, cfg.shots, cfg.query, data_rng, noiseless=cfg.noiseless)


def eval_episodes(cfg: TaskConfig, n, seed):
    """The held-out meta-test episodes: a pure function of (cfg, n, seed)."""
    task_rng = stream_rng(seed, STREAM_EVAL, 0)
    data_rng = stream_rng(seed, STREAM_EVAL, 1)
    return [_draw_episode(cfg, task_rng, data_rng) for _ in range(n)]


def meta_train(cfg: TrainConfig, seed):
    """Run the outer loop; returns an ExperimentRecord.

    Tasks and data come from per-seed streams, the held-out meta-test
    episodes from a separate stream, so the whole record is a pure
    function of (cfg, seed). Divergence halts the run gracefully with
    the partial record flagged.
    """
    t_start = time.perf_counter()
    model = build_model(cfg.model, seed)
    xi = init_xi(cfg.optimizer, model)
    task_rng = stream_rng(seed, STREAM_TASK)
    data_rng = stream_rng(seed, STREAM_DATA)
    task_pool = None
    if cfg.task.n_train_tasks:
        task_pool = [draw_task(task_rng, cfg.task.kind, ways=cfg.task.ways,
                               dim=cfg.task.dim)
                     for _ in range(cfg.task.n_train_tasks)]
    eval_steps = cfg.eval_steps if cfg.eval_steps is not None else cfg.inner.steps
    eval_inner = InnerConfig(cfg.inner.alpha, eval_steps, cfg.inner.first_order)
    evals = eval_episodes(cfg.task, cfg.eval_tasks, seed) if cfg.eval_tasks else []

    record_traj = cfg.record_trajectory
    if record_traj is None:
        record_traj = model.n_params() <= 2
    trajectory = []

    def snap(m):
        if record_traj:
            trajectory.append({k: float(v[0, 0]) for k, v in m.param_items()})

    snap(model)
    metrics = []
    state = OuterState()
    diverged = False
    divergence_step = None

    def eval_row(iteration):
        t0 = time.perf_counter()
        ev = evaluate(model, xi, evals, eval_inner)
        metrics.append({
            "iteration": iteration, "phase": "meta-test", "step": eval_steps,
            "loss": ev["loss"], "accuracy": ev["accuracy"], "mse": ev["mse"],
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        return ev

    def train_episode():
        if task_pool is None:
            return _draw_episode(cfg.task, task_rng, data_rng)
        task = task_pool[task_rng.integers(len(task_pool))]
        if cfg.task.population:
            return population_dataset(task)
        return draw_data(task, cfg.task.shots, cfg.task.query, data_rng,
                         noiseless=cfg.task.noiseless)

    for it in range(1, cfg.outer.iterations + 1):
        episodes = [train_episode() for _ in range(cfg.outer.meta_batch)]
        try:
            model, xi, m = meta_step(model, xi, episodes, cfg.inner, cfg.outer,
                                     state=state)
        except DivergenceError as err:
            diverged = True
            divergence_step = it
            metrics.append({
                "iteration": it, "phase": "meta-train", "step": cfg.inner.steps,
                "loss": float("nan"), "accuracy": None, "mse": None,
                "wall_ms": 0.0, "note": str(err),
            })
            break
        metrics.append({
            "iteration": it, "phase": "meta-train", "step": cfg.inner.steps,
            "loss": m["meta_loss"], "accuracy": None, "mse": None,
            "wall_ms": m["wall_ms"],
        })
        snap(model)
        if cfg.eval_every and evals and it % cfg.eval_every == 0 \
                and it != cfg.outer.iterations:
            eval_row(it)

    final_eval = eval_row(cfg.outer.iterations) if evals else None
    return ExperimentRecord(
        seed=seed, config=cfg.to_dict(), metrics=metrics, trajectory=trajectory,
        final_model=model, final_xi=xi, final_eval=final_eval, diverged=diverged,
        divergence_step=divergence_step,
        wall_ms=(time.perf_counter() - t_start) * 1e3,
    )
