"""Exact ground truth for tiny stochastic networks by full enumeration.

Every joint outcome (all hidden configurations times all output classes) is
listed with its probability for one fixed context. Estimator values are
obtained by running the production ``batch_backward`` on the enumerated
outcomes, so the moments computed here check the implementation itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NetworkSpec, OutputMapping, RngStream
from .stochastic_net import Estimator, StochasticNet, Trace, batch_backward, condition

MAX_HIDDEN_UNITS = 20
PROB_TOL = 1e-10

RewardFn = Callable[[np.ndarray], np.ndarray]


class EnumerationTooLarge(ValueError):
    pass


class UnreachableConfigError(ValueError):
    pass


@dataclass
class Enumeration:
    trace: Trace           # one row per joint outcome
    weights: np.ndarray    # joint probability of each row
    rewards: np.ndarray


def _check_size(spec: NetworkSpec):
    if spec.num_hidden_units > MAX_HIDDEN_UNITS:
        raise EnumerationTooLarge(
            f"{spec.num_hidden_units} hidden units exceeds the cap of {MAX_HIDDEN_UNITS}"
        )


def _all_configs(net: StochasticNet) -> list[np.ndarray]:
    m = net.mapping
    H = net.spec.num_hidden_units
    codes = np.arange(2**H)
    bits = (codes[:, None] >> np.arange(H)[None, :]) & 1
    vals = np.where(bits == 1, m.high, m.low)
    out, col = [], 0
    for w in net.spec.hidden_layers:
        out.append(vals[:, col:col + w])
        col += w
    return out


def _config_probs(net: StochasticNet, trace: Trace) -> np.ndarray:
    m = net.mapping
    logp = np.zeros(trace.batch_size)
    for p, y in zip(trace.probs, trace.outputs):
        with np.errstate(divide="ignore"):
            logp += np.where(y == m.high, np.log(p), np.log1p(-p)).sum(axis=1)
    return np.exp(logp)


def enumerate_outcomes(net: StochasticNet, context, reward_fn: RewardFn) -> Enumeration:
    _check_size(net.spec)
    configs = _all_configs(net)
    n = configs[0].shape[0]
    base = condition(net, context, configs, np.zeros(n, dtype=np.int64))
    p_h = _config_probs(net, base)
    if abs(p_h.sum() - 1.0) > PROB_TOL:
        raise AssertionError(f"hidden configuration probabilities sum to {p_h.sum()}")
    K = net.spec.num_classes
    rows = np.repeat(np.arange(n), K)
    actions = np.tile(np.arange(K), n)
    trace = condition(net, base.x[rows], [c[rows] for c in configs], actions)
    w = p_h[rows] * base.head_probs[rows, actions]
    if abs(w.sum() - 1.0) > PROB_TOL:
        raise AssertionError(f"joint outcome probabilities sum to {w.sum()}")
    return Enumeration(trace, w, np.asarray(reward_fn(actions), dtype=np.float64))


def enumerate_expected_reward(net: StochasticNet, context, reward_fn: RewardFn) -> float:
    _check_size(net.spec)
    configs = _all_configs(net)
    n = configs[0].shape[0]
    base = condition(net, context, configs, np.zeros(n, dtype=np.int64))
    r = np.asarray(reward_fn(np.arange(net.spec.num_classes)), dtype=np.float64)
    return float(_config_probs(net, base) @ (base.head_probs @ r))


def exact_gradient_fd(net: StochasticNet, context, reward_fn: RewardFn, step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the enumerated expected reward, one per parameter."""
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    _check_size(net.spec)
    params = [a.copy() for a in net.params()]
    grads = []
    for idx, a in enumerate(params):
        g = np.zeros_like(a)
        for pos in np.ndindex(a.shape):
            vals = []
            for sgn in (1.0, -1.0):
                trial = [b.copy() for b in params]
                trial[idx][pos] += sgn * step
                vals.append(enumerate_expected_reward(net.with_params(trial), context, reward_fn))
            g[pos] = (vals[0] - vals[1]) / (2.0 * step)
        grads.append(g)
    return grads


def _unit_key(unit):
    if unit in ("y", ("y",)):
        return None
    _, k, i = unit
    return int(k), int(i)


def exact_q(net: StochasticNet, unit, b, phi, context, reward_fn: RewardFn) -> float:
    """``E[R | parents = b, unit output = phi]`` by enumeration.

    ``unit`` is ``("h", layer, index)`` or ``"y"`` for the output unit.
    """
    en = enumerate_outcomes(net, context, reward_fn)
    key = _unit_key(unit)
    t = en.trace
    k = len(net.layers) if key is None else key[0]
    parents = t.parents_of(k)
    mask_b = np.all(np.isclose(parents, np.asarray(b, dtype=np.float64)[None, :]), axis=1)
    if en.weights[mask_b].sum() <= 0.0:
        raise UnreachableConfigError(f"parent configuration {b} has probability 0")
    own = t.actions if key is None else t.outputs[k][:, key[1]]
    mask = mask_b & (own == phi)
    mass = en.weights[mask].sum()
    if mass <= 0.0:
        raise UnreachableConfigError(f"output {phi} has probability 0 given {b}")
    return float(en.weights[mask] @ en.rewards[mask] / mass)


# ---------------------------------------------------------------- moments


@dataclass
class ConditionalMoments:
    """Moments of the action-value estimators of one hidden unit given its parents."""

    unit: tuple
    b: tuple
    prob_b: float
    q: dict             # phi -> exact Q(phi, b)
    mean_re: dict       # phi -> E[Q_RE(phi) | b]
    mean_hnca: dict
    var_re: dict
    var_hnca: dict
    cov_re: float       # Cov(Q(high), Q(low) | b)
    cov_hnca: float
    expected_blanket_var: dict  # phi -> E[Var(Q_RE(phi) | blanket, R) | b]
    blanket_mean_gap: float     # max |E[Q_RE | blanket, R] - Q_HNCA| over rows


@dataclass
class OracleReport:
    expected_reward: float
    exact_grad: list[np.ndarray]
    param_names: list[str]
    unit_moments: list[ConditionalMoments]
    grad_mean: dict       # estimator -> list of arrays
    grad_var: dict
    head_q: list = field(default_factory=list)  # (b, class, Q)

    def q_table(self) -> list[dict]:
        rows = []
        for m in self.unit_moments:
            for phi, q in m.q.items():
                rows.append({"unit": list(m.unit), "b": list(m.b), "phi": phi, "q": q})
        for b, c, q in self.head_q:
            rows.append({"unit": ["y"], "b": list(b), "phi": c, "q": q})
        return rows

    def to_dict(self) -> dict:
        def arrs(lst):
            return [np.asarray(a).tolist() for a in lst]

        return {
            "expected_reward": self.expected_reward,
            "param_names": self.param_names,
            "exact_grad": arrs(self.exact_grad),
            "q_table": self.q_table(),
            "estimator_moments": {
                "units": [
                    {
                        "unit": list(m.unit), "b": list(m.b), "prob_b": m.prob_b,
                        "mean_re": _str_keys(m.mean_re), "mean_hnca": _str_keys(m.mean_hnca),
                        "var_re": _str_keys(m.var_re), "var_hnca": _str_keys(m.var_hnca),
                        "cov_re": m.cov_re, "cov_hnca": m.cov_hnca,
                        "expected_blanket_var": _str_keys(m.expected_blanket_var),
                    }
                    for m in self.unit_moments
                ],
                "grad_mean": {e: arrs(v) for e, v in self.grad_mean.items()},
                "grad_var": {e: arrs(v) for e, v in self.grad_var.items()},
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _str_keys(d):
    return {repr(k): v for k, v in d.items()}


def _weighted_moments(w, x, y=None):
    """Mean(s), variance and (optionally) covariance under normalized weights ``w``."""
    mx = w @ x
    vx = w @ (x - mx) ** 2
    if y is None:
        return mx, vx
    my = w @ y
    return mx, vx, my, w @ (y - my) ** 2, w @ ((x - mx) * (y - my))


def _group(keys: np.ndarray) -> np.ndarray:
    return np.unique(keys, axis=0, return_inverse=True)[1].ravel()


def exact_moments(net: StochasticNet, context, reward_fn: RewardFn, *, literal_messages: bool = False):
    """Per-unit conditional moments and per-parameter gradient moments for both estimators."""
    en = enumerate_outcomes(net, context, reward_fn)
    t, w, R = en.trace, en.weights, en.rewards
    m = net.mapping
    res = {
        e: batch_backward(net, t, R, e, reduce="none", literal_messages=literal_messages)
        for e in Estimator
    }
    grad_mean, grad_var = {}, {}
    for e, r in res.items():
        grad_mean[e.value] = [np.tensordot(w, g, axes=1) for g in r.grads]
        grad_var[e.value] = [
            np.tensordot(w, (g - mu) ** 2, axes=1) for g, mu in zip(r.grads, grad_mean[e.value])
        ]

    hn = res[Estimator.HNCA]
    units = []
    n_hidden = len(net.layers)
    for k in range(n_hidden):
        parents = t.parents_of(k)
        children = t.actions[:, None] if k + 1 == n_hidden else t.outputs[k + 1]
        b_ids = _group(parents)
        for i in range(net.spec.hidden_layers[k]):
            y, p = t.outputs[k][:, i], t.probs[k][:, i]
            others = np.delete(t.outputs[k], i, axis=1)
            q_re = {
                m.high: np.where(y == m.high, 1.0 / p, 0.0) * R,
                m.low: np.where(y == m.low, 1.0 / (1.0 - p), 0.0) * R,
            }
            q_hn = {m.high: hn.w_high[k][:, i] * R, m.low: hn.w_low[k][:, i] * R}
            blanket = np.column_stack([b_ids, children, others, R])
            g_ids = _group(blanket)
            for bid in np.unique(b_ids):
                sel = b_ids == bid
                pb = w[sel].sum()
                wb = w[sel] / pb
                mre_h, vre_h, mre_l, vre_l, cre = _weighted_moments(wb, q_re[m.high][sel], q_re[m.low][sel])
                mhn_h, vhn_h, mhn_l, vhn_l, chn = _weighted_moments(wb, q_hn[m.high][sel], q_hn[m.low][sel])
                ebv, gap = {}, 0.0
                for phi in (m.high, m.low):
                    acc = 0.0
                    for gid in np.unique(g_ids[sel]):
                        gs = sel & (g_ids == gid)
                        pg = w[gs].sum()
                        wg = w[gs] / pg
                        mu, var = _weighted_moments(wg, q_re[phi][gs])
                        acc += pg / pb * var
                        gap = max(gap, float(np.max(np.abs(q_hn[phi][gs] - mu))))
                    ebv[phi] = acc
                q = {
                    phi: float(wb[y[sel] == phi] @ R[sel][y[sel] == phi] / wb[y[sel] == phi].sum())
                    for phi in (m.high, m.low)
                }
                units.append(ConditionalMoments(
                    unit=("h", k, i), b=tuple(parents[sel][0].tolist()), prob_b=float(pb), q=q,
                    mean_re={m.high: mre_h, m.low: mre_l}, mean_hnca={m.high: mhn_h, m.low: mhn_l},
                    var_re={m.high: vre_h, m.low: vre_l}, var_hnca={m.high: vhn_h, m.low: vhn_l},
                    cov_re=float(cre), cov_hnca=float(chn), expected_blanket_var=ebv,
                    blanket_mean_gap=gap,
                ))

    head_q = []
    last = t.parents_of(n_hidden)
    last_ids = _group(last)
    for bid in np.unique(last_ids):
        sel = last_ids == bid
        b = tuple(last[sel][0].tolist())
        for c in range(net.spec.num_classes):
            rows = sel & (t.actions == c)
            head_q.append((b, c, float(w[rows] @ R[rows] / w[rows].sum())))
    return units, grad_mean, grad_var, head_q, en


def exact_estimator_moments(net: StochasticNet, context, reward_fn: RewardFn, estimator) -> dict:
    """Moments of one estimator: per-unit conditional mean/variance/covariance and
    per-parameter gradient mean/variance."""
    e = Estimator(estimator)
    units, gm, gv, _, _ = exact_moments(net, context, reward_fn)
    pick = {
        Estimator.HNCA: ("mean_hnca", "var_hnca", "cov_hnca"),
        Estimator.REINFORCE: ("mean_re", "var_re", "cov_re"),
    }[e]
    return {
        "units": [
            {"unit": u.unit, "b": u.b, "mean": getattr(u, pick[0]), "var": getattr(u, pick[1]),
             "cov": getattr(u, pick[2])}
            for u in units
        ],
        "grad_mean": gm[e.value],
        "grad_var": gv[e.value],
    }


def oracle_report(net: StochasticNet, context, reward_fn: RewardFn, fd_step: float = 1e-5) -> OracleReport:
    units, gm, gv, head_q, _ = exact_moments(net, context, reward_fn)
    return OracleReport(
        expected_reward=enumerate_expected_reward(net, context, reward_fn),
        exact_grad=exact_gradient_fd(net, context, reward_fn, fd_step),
        param_names=net.param_names(),
        unit_moments=units,
        grad_mean=gm,
        grad_var=gv,
        head_q=head_q,
    )


# ---------------------------------------------------------------- verification


@dataclass
class Violation:
    check: str
    draw: int
    unit: object
    b: object
    detail: str

    def to_dict(self):
        return {"check": self.check, "draw": self.draw, "unit": repr(self.unit), "b": repr(self.b),
                "detail": self.detail}


@dataclass
class InstanceResult:
    draw: int
    max_bias: dict               # estimator -> max |mean - fd| / (1 + |fd|) style excess
    max_ltv_error: float
    max_blanket_gap: float
    violations: list[Violation]
    report: OracleReport


def random_instance(spec: NetworkSpec, seed: int, draw: int):
    """Glorot-initialized net and a random binary context for draw ``draw``."""
    stream = RngStream(seed, 11).child(draw)
    net = StochasticNet.init(spec, stream.child(0))
    context = stream.child(1).generator().integers(0, 2, size=spec.input_dim).astype(np.float64)
    return net, context


def instance_specs(shape: str, draws: int, seed: int = 0) -> list[NetworkSpec]:
    """Alternate the two output mappings across draws."""
    maps = [OutputMapping.PLUS_MINUS_ONE, OutputMapping.ZERO_ONE]
    return [NetworkSpec.parse_shape(shape, output_mapping=maps[d % 2], seed=seed) for d in range(draws)]


def verify_instance(
    net: StochasticNet,
    context,
    reward_fn: RewardFn,
    draw: int = 0,
    *,
    abs_tol: float = 1e-6,
    rel_tol: float = 1e-6,
    order_tol: float = 1e-12,
    ltv_tol: float = 1e-10,
    literal_messages: bool = False,
) -> InstanceResult:
    units, gm, gv, head_q, _ = exact_moments(net, context, reward_fn, literal_messages=literal_messages)
    fd = exact_gradient_fd(net, context, reward_fn)
    report = OracleReport(enumerate_expected_reward(net, context, reward_fn), fd, net.param_names(),
                          units, gm, gv, head_q)
    names = net.param_names()
    viol: list[Violation] = []
    max_bias = {}
    for e in Estimator:
        worst = 0.0
        for name, mean, ref in zip(names, gm[e.value], fd):
            err = np.abs(mean - ref)
            excess = err - (abs_tol + rel_tol * np.abs(ref))
            worst = max(worst, float(err.max()))
            if np.any(excess > 0):
                pos = tuple(int(i) for i in np.unravel_index(np.argmax(excess), np.shape(excess)))
                viol.append(Violation("unbiasedness", draw, (e.value, name, pos), None,
                                      f"mean={np.asarray(mean)[pos]!r} fd={np.asarray(ref)[pos]!r}"))
        max_bias[e.value] = worst

    max_ltv, max_gap = 0.0, 0.0
    for u in units:
        for phi in u.var_re:
            if u.var_hnca[phi] > u.var_re[phi] + order_tol:
                viol.append(Violation("conditional_variance", draw, u.unit, u.b,
                                      f"phi={phi} var_hnca={u.var_hnca[phi]!r} var_re={u.var_re[phi]!r}"))
            ltv = abs(u.var_re[phi] - u.var_hnca[phi] - u.expected_blanket_var[phi])
            max_ltv = max(max_ltv, ltv)
            if ltv > ltv_tol:
                viol.append(Violation("total_variance", draw, u.unit, u.b, f"phi={phi} err={ltv!r}"))
        if u.cov_hnca < u.cov_re - order_tol:
            viol.append(Violation("covariance", draw, u.unit, u.b,
                                  f"cov_hnca={u.cov_hnca!r} cov_re={u.cov_re!r}"))
        max_gap = max(max_gap, u.blanket_mean_gap)

    for k in range(len(net.layers)):
        for j in (2 * k, 2 * k + 1):
            excess = gv["hnca"][j] - gv["reinforce"][j] - order_tol
            if np.any(excess > 0):
                pos = tuple(int(i) for i in np.unravel_index(np.argmax(excess), np.shape(excess)))
                viol.append(Violation("gradient_variance", draw, names[j], pos,
                                      f"hnca={np.asarray(gv['hnca'][j])[pos]!r} "
                                      f"re={np.asarray(gv['reinforce'][j])[pos]!r}"))
    return InstanceResult(draw, max_bias, max_ltv, max_gap, viol, report)
