"""Stochastic networks of Bernoulli hidden units with a softmax output unit.

Two layers of API live here. The unit-level functions (``bernoulli_forward``,
``bernoulli_backward``, ``softmax_backward`` ...) operate on one neuron and
exchange explicit ``BackwardMessage`` objects; they exist to make the message
semantics inspectable and testable. The batched functions (``forward_batch``,
``batch_backward``) implement the same arithmetic vectorized over layers and
over a leading batch axis; training and the enumeration oracle use those.

Every unit sends its parents the likelihood of its *realized* output under
each counterfactual parent value. Credit for a hidden unit is

    (q_high - q_low) / q_bar * R,   q_bar = p * q_high + (1 - p) * q_low

where ``q_high``/``q_low`` are products of the child messages.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .core import (
    NetworkSpec,
    OutputMapping,
    RngStream,
    TopologyError,
    UnitParams,
    as_generator,
    glorot_init,
    log_sigmoid,
    log_softmax,
    sigmoid,
    sigmoid_prime,
    softmax,
)

# Products of more child messages than this are accumulated as log sums.
LOG_SPACE_MIN_CHILDREN = 32


class Estimator(str, enum.Enum):
    HNCA = "hnca"
    REINFORCE = "reinforce"


class DegenerateLikelihoodError(ArithmeticError):
    """The realized child outputs have zero likelihood under every parent value."""


@dataclass
class BernoulliUnitState:
    x: np.ndarray
    l: float
    p: float
    phi: float
    mapping: OutputMapping = OutputMapping.ZERO_ONE


@dataclass
class SoftmaxUnitState:
    x: np.ndarray
    l: np.ndarray
    p: np.ndarray
    phi: int
    mapping: OutputMapping = OutputMapping.ZERO_ONE


@dataclass(frozen=True)
class BackwardMessage:
    q1: float
    q0: float
    R: float


@dataclass(frozen=True)
class CreditEstimate:
    q1_prod: float
    q0_prod: float
    q_bar: float

    @property
    def credit(self) -> float:
        return (self.q1_prod - self.q0_prod) / self.q_bar


@dataclass
class GradientEstimate:
    unit: tuple
    estimator: Estimator
    weights: np.ndarray
    bias: np.ndarray | float
    credit: CreditEstimate | None = None


class OpCounter:
    """Tally of multiply-adds performed by the vectorized backward pass."""

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += int(n)


# ---------------------------------------------------------------- unit level


def _check_dims(params: UnitParams, x: np.ndarray):
    if x.ndim != 1 or x.shape[0] != params.fan_in:
        raise TopologyError(f"expected {params.fan_in} parent values, got shape {x.shape}")


def bernoulli_forward(params: UnitParams, x, rng, mapping=OutputMapping.ZERO_ONE) -> BernoulliUnitState:
    mapping = OutputMapping(mapping)
    x = np.asarray(x, dtype=np.float64)
    _check_dims(params, x)
    l = float(params.weights @ x + params.bias)
    p = sigmoid(l)
    u = as_generator(rng).random()
    phi = mapping.high if u < p else mapping.low
    return BernoulliUnitState(x, l, p, phi, mapping)


def bernoulli_counterfactuals(state: BernoulliUnitState, params: UnitParams):
    """Fire probabilities had each parent been fixed high (first) or low (second).

    Reuses the forward logit, so the cost is one multiply-add per parent.
    """
    m = state.mapping
    l1 = state.l + params.weights * (m.high - state.x)
    l0 = state.l + params.weights * (m.low - state.x)
    return sigmoid(l1), sigmoid(l0)


def realized_likelihood(p_high, phi, mapping=OutputMapping.ZERO_ONE):
    return p_high if phi == OutputMapping(mapping).high else 1.0 - p_high


def _credit(p: float, msgs):
    """Combine child messages into ``(CreditEstimate, (q1 - q0) / q_bar)``."""
    if len(msgs) > LOG_SPACE_MIN_CHILDREN:
        lq1 = float(np.sum(np.log([m.q1 for m in msgs])))
        lq0 = float(np.sum(np.log([m.q0 for m in msgs])))
        with np.errstate(divide="ignore"):
            lqbar = np.logaddexp(np.log(p) + lq1, np.log1p(-p) + lq0)
        if not np.isfinite(lqbar):
            raise DegenerateLikelihoodError(f"q_bar=0 (log q1={lq1}, log q0={lq0}, p={p})")
        ratio = float(np.exp(lq1 - lqbar) - np.exp(lq0 - lqbar))
        return CreditEstimate(float(np.exp(lq1)), float(np.exp(lq0)), float(np.exp(lqbar))), ratio
    q1 = float(np.prod([m.q1 for m in msgs]))
    q0 = float(np.prod([m.q0 for m in msgs]))
    q_bar = p * q1 + (1.0 - p) * q0
    if not q_bar > 0.0:
        raise DegenerateLikelihoodError(f"q_bar={q_bar} (q1={q1}, q0={q0}, p={p})")
    return CreditEstimate(q1, q0, q_bar), (q1 - q0) / q_bar


def bernoulli_backward(state: BernoulliUnitState, params: UnitParams, msgs, lr: float):
    """HNCA step for one Bernoulli hidden unit.

    Returns ``(parent_messages, updated_params, gradient)``; the gradient is
    ascent direction on expected reward.
    """
    if not msgs:
        raise ValueError("a hidden unit needs at least one child message")
    R = msgs[0].R
    c, ratio = _credit(state.p, msgs)
    g = sigmoid_prime(state.l) * ratio * R
    gw = g * state.x
    p1, p0 = bernoulli_counterfactuals(state, params)
    out = [
        BackwardMessage(
            realized_likelihood(a, state.phi, state.mapping),
            realized_likelihood(b, state.phi, state.mapping),
            R,
        )
        for a, b in zip(p1, p0)
    ]
    new = UnitParams(params.weights + lr * gw, params.bias + lr * g)
    return out, new, GradientEstimate((), Estimator.HNCA, gw, g, c)


def reinforce_backward_bernoulli(state: BernoulliUnitState, params: UnitParams, R: float, lr: float):
    score = (1.0 if state.phi == state.mapping.high else 0.0) - state.p
    g = score * R
    gw = g * state.x
    new = UnitParams(params.weights + lr * gw, params.bias + lr * g)
    return new, GradientEstimate((), Estimator.REINFORCE, gw, g)


def softmax_forward(params: UnitParams, x, rng, mapping=OutputMapping.ZERO_ONE) -> SoftmaxUnitState:
    x = np.asarray(x, dtype=np.float64)
    _check_dims(params, x)
    l = params.weights @ x + params.bias
    p = softmax(l)
    u = as_generator(rng).random()
    phi = min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)
    return SoftmaxUnitState(x, l, p, phi, OutputMapping(mapping))


def softmax_backward(state: SoftmaxUnitState, params: UnitParams, R: float, lr: float):
    """REINFORCE update for the output unit plus counterfactual messages to its parents."""
    m = state.mapping
    theta = params.weights
    # L[j, c]: class logits had parent j been fixed high / low
    L1 = state.l[None, :] + theta.T * (m.high - state.x)[:, None]
    L0 = state.l[None, :] + theta.T * (m.low - state.x)[:, None]
    q1 = np.exp(log_softmax(L1, axis=1)[:, state.phi])
    q0 = np.exp(log_softmax(L0, axis=1)[:, state.phi])
    out = [BackwardMessage(float(a), float(b), R) for a, b in zip(q1, q0)]
    g = (np.eye(len(state.p))[state.phi] - state.p) * R
    gw = np.outer(g, state.x)
    new = UnitParams(theta + lr * gw, params.bias + lr * g)
    return out, new, GradientEstimate(("y",), Estimator.REINFORCE, gw, g)


# ---------------------------------------------------------------- networks


@dataclass
class StochasticNet:
    spec: NetworkSpec
    layers: list[UnitParams]
    head: UnitParams

    @classmethod
    def init(cls, spec: NetworkSpec, rng: RngStream | None = None) -> "StochasticNet":
        rng = rng if rng is not None else RngStream(spec.seed, 0)
        w = spec.widths
        params = [glorot_init(w[k], w[k + 1], rng.child(k)) for k in range(len(w) - 1)]
        return cls(spec, params[:-1], params[-1])

    @property
    def mapping(self) -> OutputMapping:
        return self.spec.output_mapping

    def params(self) -> list[np.ndarray]:
        out = []
        for p in [*self.layers, self.head]:
            out += [p.weights, p.bias]
        return out

    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.layers)):
            names += [f"h{k}.W", f"h{k}.b"]
        return names + ["y.W", "y.b"]

    def with_params(self, arrays) -> "StochasticNet":
        ups = [UnitParams(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return StochasticNet(self.spec, ups[:-1], ups[-1])

    def apply_update(self, grads, lr: float) -> "StochasticNet":
        return self.with_params([p + lr * g for p, g in zip(self.params(), grads)])

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.params())


@dataclass
class Trace:
    """Realized forward pass over a batch. Row ``b`` of every array is one sample."""

    x: np.ndarray
    logits: list[np.ndarray]
    probs: list[np.ndarray]
    outputs: list[np.ndarray]
    head_logits: np.ndarray
    head_probs: np.ndarray
    actions: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def parents_of(self, k: int) -> np.ndarray:
        """Parent values of hidden layer ``k`` (``k == len(outputs)`` is the head)."""
        return self.x if k == 0 else self.outputs[k - 1]

    def unit_states(self, net: StochasticNet, b: int = 0) -> list:
        states: list = []
        for k in range(len(self.outputs)):
            xk = self.parents_of(k)[b]
            for i in range(self.outputs[k].shape[1]):
                states.append(
                    BernoulliUnitState(
                        xk.copy(), float(self.logits[k][b, i]), float(self.probs[k][b, i]),
                        float(self.outputs[k][b, i]), net.mapping,
                    )
                )
        states.append(
            SoftmaxUnitState(
                self.parents_of(len(self.outputs))[b].copy(), self.head_logits[b].copy(),
                self.head_probs[b].copy(), int(self.actions[b]), net.mapping,
            )
        )
        return states


def _as_batch(net: StochasticNet, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.spec.input_dim:
        raise TopologyError(f"expected contexts of dim {net.spec.input_dim}, got shape {X.shape}")
    return X


def draw_uniforms(spec: NetworkSpec, streams) -> np.ndarray:
    """One row of uniforms per stream: a draw for each hidden unit, then one for the head."""
    n = spec.num_hidden_units + 1
    return np.stack([s.generator().random(n) for s in streams])


def _sample_class(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def forward_batch(net: StochasticNet, X, uniforms: np.ndarray) -> Trace:
    X = _as_batch(net, X)
    m = net.mapping
    logits, probs, outputs = [], [], []
    h, col = X, 0
    for layer in net.layers:
        l = h @ layer.weights.T + layer.bias
        p = sigmoid(l)
        n = l.shape[1]
        h = np.where(uniforms[:, col:col + n] < p, m.high, m.low)
        col += n
        logits.append(l)
        probs.append(p)
        outputs.append(h)
    hl = h @ net.head.weights.T + net.head.bias
    hp = softmax(hl, axis=1)
    return Trace(X, logits, probs, outputs, hl, hp, _sample_class(hp, uniforms[:, col]))


def condition(net: StochasticNet, X, outputs, actions) -> Trace:
    """Build the trace for given hidden realizations and actions (no sampling)."""
    X = _as_batch(net, X)
    if X.shape[0] == 1 and outputs[0].shape[0] > 1:
        X = np.repeat(X, outputs[0].shape[0], axis=0)
    logits, probs = [], []
    h = X
    for layer, out in zip(net.layers, outputs):
        l = h @ layer.weights.T + layer.bias
        logits.append(l)
        probs.append(sigmoid(l))
        h = out
    hl = h @ net.head.weights.T + net.head.bias
    return Trace(X, logits, probs, [np.asarray(o, dtype=np.float64) for o in outputs], hl,
                 softmax(hl, axis=1), np.asarray(actions, dtype=np.int64))


def network_forward(net: StochasticNet, context, rng: RngStream) -> Trace:
    """Sample one forward pass for a single context."""
    return forward_batch(net, context, draw_uniforms(net.spec, [rng]))


def greedy_actions(net: StochasticNet, X) -> np.ndarray:
    """Propagate each hidden unit's more probable value, then take the head argmax."""
    h = _as_batch(net, X)
    m = net.mapping
    for layer in net.layers:
        h = np.where(h @ layer.weights.T + layer.bias >= 0.0, m.high, m.low)
    return np.argmax(h @ net.head.weights.T + net.head.bias, axis=1)


@dataclass
class BackwardResult:
    grads: list[np.ndarray]
    # per hidden layer, (B, width); None entries under REINFORCE
    log_q1: list = field(default_factory=list)
    log_q0: list = field(default_factory=list)
    w_high: list = field(default_factory=list)
    w_low: list = field(default_factory=list)
    # per hidden layer, per-edge log messages (B, n_children, n_parents)
    edges: list = field(default_factory=list)


def _bernoulli_edge_messages(W, L, y, x, mapping, literal, counter):
    # L[b, i] + W[i, j] * (v - x[b, j]) for v in {high, low}
    d1 = mapping.high - x
    d0 = mapping.low - x
    L1 = L[:, :, None] + W[None, :, :] * d1[:, None, :]
    L0 = L[:, :, None] + W[None, :, :] * d0[:, None, :]
    if literal:
        lq1, lq0 = log_sigmoid(L1), log_sigmoid(L0)
    else:
        s = np.where(y == mapping.high, 1.0, -1.0)[:, :, None]
        lq1, lq0 = log_sigmoid(s * L1), log_sigmoid(s * L0)
    if counter is not None:
        counter.add(4 * L1.size)
    return lq1, lq0


def _softmax_edge_messages(theta, l, a, x, mapping, counter):
    d1 = mapping.high - x
    d0 = mapping.low - x
    rows = np.arange(len(a))
    out = []
    for d in (d1, d0):
        L = l[:, None, :] + theta.T[None, :, :] * d[:, :, None]  # (B, parents, classes)
        ls = log_softmax(L, axis=2)
        out.append(ls[rows, :, a][:, None, :])
        if counter is not None:
            counter.add(2 * L.size)
    return out[0], out[1]


def batch_backward(
    net: StochasticNet,
    trace: Trace,
    rewards,
    estimator: Estimator = Estimator.HNCA,
    *,
    reduce: str = "mean",
    literal_messages: bool = False,
    keep_edges: bool = False,
    counter: OpCounter | None = None,
) -> BackwardResult:
    """Gradient estimates for every parameter over a batch of traces.

    ``reduce="mean"`` averages over the batch (one array per parameter);
    ``reduce="none"`` keeps a leading batch axis. ``literal_messages`` makes
    Bernoulli children pass raw counterfactual fire probabilities instead of
    the likelihood of their realized output; it exists only as a negative
    control and yields a biased estimator.
    """
    estimator = Estimator(estimator)
    m = net.mapping
    R = np.broadcast_to(np.asarray(rewards, dtype=np.float64), (trace.batch_size,))
    B = trace.batch_size
    n_hidden = len(net.layers)

    def outer(g, xin):
        if counter is not None:
            counter.add(g.size * xin.shape[1])
        if reduce == "none":
            return g[:, :, None] * xin[:, None, :], g
        return g.T @ xin / B, g.mean(axis=0)

    res = BackwardResult(grads=[])
    head_g = (np.eye(net.spec.num_classes)[trace.actions] - trace.head_probs) * R[:, None]
    head_grads = outer(head_g, trace.parents_of(n_hidden))

    layer_grads = []
    for k in range(n_hidden):
        l, p, y = trace.logits[k], trace.probs[k], trace.outputs[k]
        if estimator is Estimator.REINFORCE:
            g = (np.where(y == m.high, 1.0, 0.0) - p) * R[:, None]
            for lst in (res.log_q1, res.log_q0, res.w_high, res.w_low, res.edges):
                lst.append(None)
        else:
            if k + 1 < n_hidden:
                nxt = net.layers[k + 1]
                e1, e0 = _bernoulli_edge_messages(
                    nxt.weights, trace.logits[k + 1], trace.outputs[k + 1], y, m,
                    literal_messages, counter,
                )
            else:
                e1, e0 = _softmax_edge_messages(
                    net.head.weights, trace.head_logits, trace.actions, y, m, counter
                )
            lq1, lq0 = e1.sum(axis=1), e0.sum(axis=1)
            lp, l1p = log_sigmoid(l), log_sigmoid(-l)
            lqbar = np.logaddexp(lp + lq1, l1p + lq0)
            if not np.all(np.isfinite(lqbar)):
                raise DegenerateLikelihoodError(f"q_bar underflowed to 0 in hidden layer {k}")
            w1, w0 = np.exp(lq1 - lqbar), np.exp(lq0 - lqbar)
            g = p * (1.0 - p) * (w1 - w0) * R[:, None]
            if counter is not None:
                counter.add(8 * g.size)
            res.log_q1.append(lq1)
            res.log_q0.append(lq0)
            res.w_high.append(w1)
            res.w_low.append(w0)
            res.edges.append((e1, e0) if keep_edges else None)
        layer_grads.append(outer(g, trace.parents_of(k)))

    for gw, gb in layer_grads:
        res.grads += [gw, gb]
    res.grads += list(head_grads)
    return res


def network_backward(net: StochasticNet, trace: Trace, R: float, lr: float, estimator=Estimator.HNCA,
                     counter: OpCounter | None = None):
    """Single-trace backward pass: returns ``(updated_net, per-unit gradients)``.

    Pass an ``OpCounter`` to tally multiply-adds.
    """
    estimator = Estimator(estimator)
    if trace.batch_size != 1:
        raise ValueError("network_backward takes a single trace; use batch_backward for batches")
    res = batch_backward(net, trace, [R], estimator, counter=counter)
    per_unit = []
    for k, layer in enumerate(net.layers):
        gw, gb = res.grads[2 * k], res.grads[2 * k + 1]
        for i in range(layer.weights.shape[0]):
            credit = None
            if estimator is Estimator.HNCA:
                q1, q0 = np.exp(res.log_q1[k][0, i]), np.exp(res.log_q0[k][0, i])
                p = trace.probs[k][0, i]
                credit = CreditEstimate(float(q1), float(q0), float(p * q1 + (1 - p) * q0))
            per_unit.append(GradientEstimate(("h", k, i), estimator, gw[i].copy(), float(gb[i]), credit))
    per_unit.append(GradientEstimate(("y",), Estimator.REINFORCE, res.grads[-2].copy(), res.grads[-1].copy()))
    return net.apply_update(res.grads, lr), per_unit


def trace_to_json(net: StochasticNet, trace: Trace, R: float, b: int = 0) -> str:
    """Debug dump of one trace: per-unit forward values and per-edge HNCA messages."""
    res = batch_backward(net, trace, R, Estimator.HNCA, reduce="none", keep_edges=True)
    units = []
    for k in range(len(net.layers)):
        for i in range(trace.outputs[k].shape[1]):
            units.append({
                "layer": k, "index": i, "l": float(trace.logits[k][b, i]),
                "p": float(trace.probs[k][b, i]), "phi": float(trace.outputs[k][b, i]),
            })
    units.append({
        "layer": len(net.layers), "index": 0, "l": trace.head_logits[b].tolist(),
        "p": trace.head_probs[b].tolist(), "phi": int(trace.actions[b]),
    })
    edges = []
    for k, pair in enumerate(res.edges):
        e1, e0 = pair
        for c in range(e1.shape[1]):
            for j in range(e1.shape[2]):
                edges.append({
                    "child_layer": k + 1, "child": c, "parent_layer": k, "parent": j,
                    "q1": float(np.exp(e1[b, c, j])), "q0": float(np.exp(e0[b, c, j])),
                })
    return json.dumps({"units": units, "messages": edges, "R": float(np.asarray(R).ravel()[b])},
                      sort_keys=True)
