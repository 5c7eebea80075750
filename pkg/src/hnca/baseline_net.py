"""Deterministic MLP baselines with a softmax policy head.

Hidden activations are deterministic; only the head samples an action. The
whole network is trained with REINFORCE, i.e. ``R * d log pi(a|x) / d theta``
backpropagated through every layer.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import RngStream, TopologyError, UnitParams, as_generator, glorot_init, sigmoid, softmax


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"

    def __call__(self, z):
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return sigmoid(z)

    def derivative(self, z, a):
        """Derivative given preactivation ``z`` and activation ``a``."""
        if self is Activation.TANH:
            return 1.0 - a * a
        if self is Activation.RELU:
            return (z > 0.0).astype(np.float64)
        return a * (1.0 - a)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation


@dataclass
class DenseNet:
    layers: list[DenseLayer]
    head: UnitParams

    def __post_init__(self):
        fan = None
        for layer in self.layers:
            if fan is not None and layer.weights.shape[1] != fan:
                raise TopologyError("consecutive layer dimensions do not chain")
            fan = layer.weights.shape[0]
        if fan is not None and self.head.fan_in != fan:
            raise TopologyError("head fan-in does not match the last hidden layer")
        for a in self.params():
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters must be finite")

    @classmethod
    def init(cls, input_dim: int, hidden_layers, num_classes: int, activation, rng: RngStream):
        activation = Activation(activation)
        widths = [input_dim, *hidden_layers, num_classes]
        ps = [glorot_init(widths[k], widths[k + 1], rng.child(k)) for k in range(len(widths) - 1)]
        layers = [DenseLayer(p.weights, p.bias, activation) for p in ps[:-1]]
        return cls(layers, ps[-1])

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1] if self.layers else self.head.fan_in

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out + [self.head.weights, self.head.bias]

    def with_params(self, arrays) -> "DenseNet":
        layers = [
            DenseLayer(np.asarray(arrays[2 * k]), np.asarray(arrays[2 * k + 1]), layer.activation)
            for k, layer in enumerate(self.layers)
        ]
        return DenseNet(layers, UnitParams(arrays[-2], arrays[-1]))

    def apply_update(self, grads, lr: float) -> "DenseNet":
        return self.with_params([p + lr * g for p, g in zip(self.params(), grads)])

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.params())


@dataclass
class DenseTrace:
    x: np.ndarray
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    probs: np.ndarray
    actions: np.ndarray


def class_probs(net: DenseNet, X) -> tuple[list, list, np.ndarray]:
    h = np.asarray(X, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != net.input_dim:
        raise TopologyError(f"expected contexts of dim {net.input_dim}, got {h.shape[1]}")
    zs, hs = [], [h]
    for layer in net.layers:
        z = h @ layer.weights.T + layer.bias
        h = layer.activation(z)
        zs.append(z)
        hs.append(h)
    return zs, hs, softmax(h @ net.head.weights.T + net.head.bias, axis=1)


def dense_forward(net: DenseNet, X, rng) -> DenseTrace:
    """Forward pass with a sampled action per row.

    ``rng`` is either a random stream or an array of uniforms whose last column
    drives the head sample of each row.
    """
    zs, hs, p = class_probs(net, X)
    if isinstance(rng, np.ndarray):
        u = rng.reshape(len(p), -1)[:, -1]
    else:
        u = as_generator(rng).random(len(p))
    cdf = np.cumsum(p, axis=1)
    a = np.minimum((cdf <= u[:, None]).sum(axis=1), p.shape[1] - 1)
    return DenseTrace(hs[0], zs, hs[1:], p, a)


def dense_policy_gradient(net: DenseNet, trace: DenseTrace, rewards, reduce: str = "mean"):
    """``R * grad log pi(a|x)`` for every parameter, averaged over the batch unless ``reduce="none"``."""
    B = len(trace.actions)
    R = np.broadcast_to(np.asarray(rewards, dtype=np.float64), (B,))
    delta = (np.eye(trace.probs.shape[1])[trace.actions] - trace.probs) * R[:, None]
    inputs = [trace.x, *trace.acts]

    def pack(d, xin):
        if reduce == "none":
            return [d[:, :, None] * xin[:, None, :], d]
        return [d.T @ xin / B, d.mean(axis=0)]

    grads = pack(delta, inputs[-1])
    W_next = net.head.weights
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        delta = (delta @ W_next) * layer.activation.derivative(trace.preacts[k], trace.acts[k])
        grads = pack(delta, inputs[k]) + grads
        W_next = layer.weights
    return grads


def dense_greedy_actions(net: DenseNet, X) -> np.ndarray:
    return np.argmax(class_probs(net, X)[2], axis=1)
