"""Seeded training loops, learning-rate sweeps and gradient-variance probes."""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .bandit import Dataset, epoch_iterator, reward
from .baseline_net import Activation, DenseNet, dense_forward, dense_greedy_actions, dense_policy_gradient
from .core import NetworkSpec, RngStream
from .stochastic_net import (
    DegenerateLikelihoodError,
    Estimator,
    StochasticNet,
    batch_backward,
    forward_batch,
    greedy_actions,
)

log = logging.getLogger(__name__)

CSV_VERSION = "# hnca-metrics v1"
CSV_FIELDS = [
    "run_id", "estimator", "lr", "seed", "step", "epoch", "sampled_acc", "greedy_acc",
    "mean_reward", "heldout_sampled_acc", "heldout_greedy_acc",
]

# stream ids under the run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_SAMPLE, STREAM_EVAL = 1, 2, 3, 4


class Method(str, enum.Enum):
    HNCA = "hnca"
    REINFORCE = "reinforce"
    BACKPROP_TANH = "backprop_tanh"
    BACKPROP_RELU = "backprop_relu"
    BACKPROP_SIGMOID = "backprop_sigmoid"

    @property
    def activation(self) -> Activation | None:
        return {
            Method.BACKPROP_TANH: Activation.TANH,
            Method.BACKPROP_RELU: Activation.RELU,
            Method.BACKPROP_SIGMOID: Activation.SIGMOID,
        }.get(self)


class NumericAbort(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"numeric abort at batch {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkSpec
    estimator: Method
    learning_rate: float
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0          # steps between evaluations; 0 means five per epoch
    eval_window: float = 0.1     # trailing fraction of steps averaged into the final accuracy
    max_abs_param: float = 1e4   # parameters beyond this count as divergence
    run_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "estimator", Method(self.estimator))
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.eval_window <= 1:
            raise ValueError("eval_window must lie in (0, 1]")

    @property
    def name(self) -> str:
        return self.run_id or f"{self.estimator.value}-lr{self.learning_rate:g}-s{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["estimator"] = self.estimator.value
        return d


@dataclass
class EvalPoint:
    step: int
    epoch: float
    sampled_acc: float
    greedy_acc: float
    mean_reward: float
    heldout_sampled_acc: float | None = None
    heldout_greedy_acc: float | None = None


@dataclass
class RunMetrics:
    run_id: str
    config: TrainConfig
    points: list[EvalPoint]
    total_steps: int
    final_sampled_acc: float
    final_greedy_acc: float
    wall_clock: float = 0.0
    params: list = field(default_factory=list, repr=False)

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_VERSION + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        c = self.config
        for p in self.points:
            w.writerow([
                self.run_id, c.estimator.value, repr(c.learning_rate), c.seed, p.step, repr(p.epoch),
                repr(p.sampled_acc), repr(p.greedy_acc), repr(p.mean_reward),
                "" if p.heldout_sampled_acc is None else repr(p.heldout_sampled_acc),
                "" if p.heldout_greedy_acc is None else repr(p.heldout_greedy_acc),
            ])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.csv_text())


# ---------------------------------------------------------------- learners


class _StochasticLearner:
    def __init__(self, config: TrainConfig):
        self.estimator = Estimator(config.estimator.value)
        self.model = StochasticNet.init(config.network, RngStream(config.seed, STREAM_INIT))
        self.n_uniforms = config.network.num_hidden_units + 1

    def act(self, X, U):
        trace = forward_batch(self.model, X, U)
        return trace, trace.actions

    def grads(self, trace, R):
        return batch_backward(self.model, trace, R, self.estimator).grads

    def greedy(self, X):
        return greedy_actions(self.model, X)


class _DenseLearner:
    def __init__(self, config: TrainConfig):
        s = config.network
        self.model = DenseNet.init(s.input_dim, s.hidden_layers, s.num_classes,
                                   config.estimator.activation, RngStream(config.seed, STREAM_INIT))
        self.n_uniforms = 1

    def act(self, X, U):
        trace = dense_forward(self.model, X, U)
        return trace, trace.actions

    def grads(self, trace, R):
        return dense_policy_gradient(self.model, trace, R)

    def greedy(self, X):
        return dense_greedy_actions(self.model, X)


def make_learner(config: TrainConfig):
    if config.estimator.activation is None:
        return _StochasticLearner(config)
    return _DenseLearner(config)


def _element_uniforms(n: int, streams) -> np.ndarray:
    return np.stack([s.generator().random(n) for s in streams])


def _evaluate(learner, ds: Dataset, stream: RngStream) -> tuple[float, float]:
    U = stream.generator().random((len(ds), learner.n_uniforms))
    _, actions = learner.act(ds.contexts, U)
    sampled = float(np.mean(actions == ds.labels))
    greedy = float(np.mean(learner.greedy(ds.contexts) == ds.labels))
    return sampled, greedy


def train(config: TrainConfig, dataset: Dataset, heldout: Dataset | None = None) -> RunMetrics:
    """Run one seeded training job and return its evaluation trace.

    Each batch element gets its own random stream keyed by (seed, step, index),
    gradients are averaged over the batch and applied as one ascent step.
    """
    if dataset.dim != config.network.input_dim:
        raise ValueError(f"dataset has dim {dataset.dim}, network expects {config.network.input_dim}")
    if dataset.num_classes != config.network.num_classes:
        raise ValueError("dataset and network disagree on num_classes")
    t0 = time.perf_counter()
    learner = make_learner(config)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    every = config.eval_every or max(1, steps_per_epoch // 5)
    sample_root = RngStream(config.seed, STREAM_SAMPLE)
    eval_root = RngStream(config.seed, STREAM_EVAL)
    points: list[EvalPoint] = []
    step, r_sum, r_count = 0, 0.0, 0

    for epoch in range(config.epochs):
        for idx in epoch_iterator(n, config.batch_size, RngStream(config.seed, STREAM_SHUFFLE).child(epoch)):
            X, y = dataset.contexts[idx], dataset.labels[idx]
            U = _element_uniforms(learner.n_uniforms, [sample_root.child(step, i) for i in range(len(idx))])
            trace, actions = learner.act(X, U)
            R = reward(y, actions)
            try:
                grads = learner.grads(trace, R)
            except DegenerateLikelihoodError as exc:
                raise NumericAbort(step, str(exc)) from exc
            if config.learning_rate != 0.0:
                learner.model = learner.model.apply_update(grads, config.learning_rate)
            params = learner.model.params()
            if not all(np.all(np.isfinite(p)) for p in params):
                raise NumericAbort(step, "non-finite parameter")
            if max(float(np.max(np.abs(p))) for p in params) > config.max_abs_param:
                raise NumericAbort(step, f"parameter magnitude above {config.max_abs_param:g}")
            r_sum += float(R.sum())
            r_count += len(idx)
            step += 1
            if step % every == 0 or step == total:
                s_acc, g_acc = _evaluate(learner, dataset, eval_root.child(step))
                h_s = h_g = None
                if heldout is not None:
                    h_s, h_g = _evaluate(learner, heldout, eval_root.child(step, 1))
                points.append(EvalPoint(step, step / steps_per_epoch, s_acc, g_acc,
                                        r_sum / max(r_count, 1), h_s, h_g))
                r_sum, r_count = 0.0, 0

    cutoff = total * (1.0 - config.eval_window)
    window = [p for p in points if p.step > cutoff] or points[-1:]
    return RunMetrics(
        run_id=config.name,
        config=config,
        points=points,
        total_steps=total,
        final_sampled_acc=float(np.mean([p.sampled_acc for p in window])),
        final_greedy_acc=float(np.mean([p.greedy_acc for p in window])),
        wall_clock=time.perf_counter() - t0,
        params=[p.copy() for p in learner.model.params()],
    )


# ---------------------------------------------------------------- sweeps


@dataclass
class CellResult:
    lr: float
    seed: int
    run_id: str
    final_acc: float | None
    error: str | None = None
    csv_text: str = ""
    wall_clock: float = 0.0


@dataclass
class SweepResult:
    cells: list[CellResult]
    lr_stats: dict           # lr -> {"mean", "se", "ci95", "n", "failed"}
    best_lr: float | None
    max_mean_lr: float | None = None
    threshold: float | None = None

    def summary(self) -> dict:
        return {
            "best_lr": self.best_lr,
            "max_mean_lr": self.max_mean_lr,
            "threshold": self.threshold,
            "lr_stats": [{"lr": lr, **s} for lr, s in sorted(self.lr_stats.items())],
            "cells": [
                {"lr": c.lr, "seed": c.seed, "run_id": c.run_id, "final_acc": c.final_acc,
                 "failed": c.error is not None, "error": c.error}
                for c in self.cells
            ],
        }

    def best_mean(self) -> float | None:
        return None if self.best_lr is None else self.lr_stats[self.best_lr]["mean"]


def select_best_lr(lr_stats: dict) -> tuple[float | None, float | None, float | None]:
    """Highest learning rate whose mean is within one standard error of the best mean.

    ``lr_stats`` maps lr -> {"mean", "se"}; entries with ``mean`` None are skipped.
    The standard error is that of the lr with the highest mean. Returns
    ``(best_lr, max_mean_lr, threshold)``.
    """
    valid = {lr: s for lr, s in lr_stats.items() if s.get("mean") is not None}
    if not valid:
        return None, None, None
    top = max(sorted(valid), key=lambda lr: valid[lr]["mean"])
    threshold = valid[top]["mean"] - (valid[top].get("se") or 0.0)
    best = max(lr for lr, s in valid.items() if s["mean"] >= threshold)
    return best, top, threshold


_WORKER_DATA: dict = {}


def _init_worker(dataset, heldout):
    _WORKER_DATA["train"] = dataset
    _WORKER_DATA["heldout"] = heldout


def _run_cell(config: TrainConfig) -> CellResult:
    lr, seed = config.learning_rate, config.seed
    try:
        m = train(config, _WORKER_DATA["train"], _WORKER_DATA.get("heldout"))
    except (NumericAbort, FloatingPointError) as exc:
        return CellResult(lr, seed, config.name, None, str(exc))
    return CellResult(lr, seed, config.name, m.final_sampled_acc, None, m.csv_text(), m.wall_clock)


def lr_sweep(base: TrainConfig, lrs, seeds, dataset: Dataset, heldout: Dataset | None = None,
             parallel: int = 1) -> SweepResult:
    lrs = [float(x) for x in lrs]
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least two seeds for standard errors")
    if lrs != sorted(lrs):
        raise ValueError("learning rates must be sorted ascending")
    configs = [
        replace(base, learning_rate=lr, seed=s, network=replace(base.network, seed=s),
                run_id=f"{base.estimator.value}-lr{lr:g}-s{s}")
        for lr in lrs for s in seeds
    ]
    if parallel > 1:
        with ProcessPoolExecutor(parallel, initializer=_init_worker, initargs=(dataset, heldout)) as ex:
            cells = list(ex.map(_run_cell, configs))
    else:
        _init_worker(dataset, heldout)
        cells = [_run_cell(c) for c in configs]
        _WORKER_DATA.clear()

    lr_stats = {}
    for lr in lrs:
        group = [c for c in cells if c.lr == lr]
        failed = sum(c.error is not None for c in group)
        accs = np.array([c.final_acc for c in group if c.error is None])
        if failed or len(accs) < 2:
            # a learning rate that diverges on any seed is not eligible
            lr_stats[lr] = {"mean": None, "se": None, "ci95": None, "n": len(accs), "failed": failed}
            continue
        se = float(accs.std(ddof=1) / np.sqrt(len(accs)))
        half = float(stats.t.ppf(0.975, len(accs) - 1) * se)
        lr_stats[lr] = {"mean": float(accs.mean()), "se": se, "ci95": half, "n": len(accs), "failed": 0}
    best, top, thr = select_best_lr(lr_stats)
    return SweepResult(cells, lr_stats, best, top, thr)


def default_parallelism() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------- variance probe


@dataclass
class ProbeResult:
    mean: list[np.ndarray]
    var: list[np.ndarray]
    se_mean: list[np.ndarray]
    se_var: list[np.ndarray]
    samples: int


def variance_probe(net: StochasticNet, contexts, labels, estimator, samples: int, rng: RngStream,
                   chunk: int = 20000) -> ProbeResult:
    """Empirical per-parameter mean and variance of the batch-mean gradient
    estimate at frozen parameters, over ``samples`` independent resamplings."""
    if samples < 100:
        raise ValueError("samples must be >= 100")
    estimator = Estimator(estimator)
    X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    B = len(X)
    n_params = len(net.params())
    shift = None
    sums = [[0.0] * n_params for _ in range(4)]
    done, c = 0, 0
    while done < samples:
        m = min(chunk, samples - done)
        U = rng.child(c).generator().random((m * B, net.spec.num_hidden_units + 1))
        trace = forward_batch(net, np.tile(X, (m, 1)), U)
        R = reward(np.tile(y, m), trace.actions)
        grads = batch_backward(net, trace, R, estimator, reduce="none").grads
        per_sample = [g.reshape(m, B, *g.shape[1:]).mean(axis=1) for g in grads]
        if shift is None:
            shift = [g.mean(axis=0) for g in per_sample]
        for j, g in enumerate(per_sample):
            d = g - shift[j]
            for k in range(4):
                sums[k][j] = sums[k][j] + np.sum(d ** (k + 1), axis=0)
        done += m
        c += 1
    n = float(samples)
    mean, var, se_m, se_v = [], [], [], []
    for j in range(n_params):
        m1, m2, m3, m4 = (sums[k][j] / n for k in range(4))
        mu = m1 + shift[j]
        v = m2 - m1 ** 2
        c4 = m4 - 4 * m3 * m1 + 6 * m2 * m1 ** 2 - 3 * m1 ** 4
        v_unbiased = v * n / (n - 1)
        mean.append(mu)
        var.append(v_unbiased)
        se_m.append(np.sqrt(np.maximum(v, 0.0) / n))
        se_v.append(np.sqrt(np.maximum(c4 - v ** 2, 0.0) / n))
    return ProbeResult(mean, var, se_m, se_v, samples)
