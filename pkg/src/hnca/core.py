"""Shared types and numerics: network topology, output mappings, seeded
random streams, activations and Glorot initialization."""
from __future__ import annotations

import enum
import graphlib
import json
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    """Structural problem with a graph or a parameter shape."""


class OutputMapping(str, enum.Enum):
    ZERO_ONE = "zero_one"
    PLUS_MINUS_ONE = "plus_minus_one"

    @property
    def high(self) -> float:
        return 1.0

    @property
    def low(self) -> float:
        return 0.0 if self is OutputMapping.ZERO_ONE else -1.0


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream)``.

    ``path`` extends the key hierarchically, so ``RngStream(7, 2).child(10, 3)``
    is a different, equally reproducible stream. The draw sequence depends only
    on the key, never on which thread or process consumes it.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def child(self, *words: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.path + tuple(int(w) for w in words))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
            spawn_key=self.path,
        )
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


# ---------------------------------------------------------------- numerics


def sigmoid(l):
    """Logistic function, branch-stable for large ``|l|``."""
    l = np.asarray(l, dtype=np.float64)
    e = np.exp(-np.abs(l))
    out = np.where(l >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid_prime(l):
    p = sigmoid(l)
    return p * (1.0 - p)


def log_sigmoid(l):
    """``log(sigmoid(l))`` without underflow; ``log(1 - sigmoid(l)) == log_sigmoid(-l)``."""
    l = np.asarray(l, dtype=np.float64)
    return -np.logaddexp(0.0, -l)


def softmax(l, axis: int = -1):
    l = np.asarray(l, dtype=np.float64)
    z = l - np.max(l, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(l, axis: int = -1):
    l = np.asarray(l, dtype=np.float64)
    m = np.max(l, axis=axis, keepdims=True)
    z = l - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---------------------------------------------------------------- parameters


@dataclass
class UnitParams:
    """Weights and bias of one unit or of one layer of units.

    A single Bernoulli unit has a weight vector and a scalar bias. A softmax
    unit (or a whole Bernoulli layer) has a ``(rows, parents)`` matrix and one
    bias per row.
    """

    weights: np.ndarray
    bias: np.ndarray | float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim == 1:
            if self.bias.ndim != 0:
                raise TopologyError("vector weights need a scalar bias")
        elif self.weights.ndim == 2:
            if self.bias.shape != (self.weights.shape[0],):
                raise TopologyError(
                    f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} rows"
                )
        else:
            raise TopologyError("weights must be a vector or a matrix")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("parameters must be finite")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[-1]

    def unit(self, i: int) -> "UnitParams":
        """Parameters of row ``i`` of a layer, as a single-unit ``UnitParams``."""
        return UnitParams(self.weights[i].copy(), float(self.bias[i]))

    def copy(self) -> "UnitParams":
        return UnitParams(self.weights.copy(), self.bias.copy())


def glorot_init(fan_in: int, fan_out: int, rng: RngStream | np.random.Generator) -> UnitParams:
    """Uniform Glorot weights of shape ``(fan_out, fan_in)``, zero biases."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = as_generator(rng).uniform(-bound, bound, size=(fan_out, fan_in))
    return UnitParams(w, np.zeros(fan_out))


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    num_classes: int
    output_mapping: OutputMapping = OutputMapping.PLUS_MINUS_ONE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        object.__setattr__(self, "output_mapping", OutputMapping(self.output_mapping))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.num_classes]

    @property
    def num_hidden_units(self) -> int:
        return sum(self.hidden_layers)

    @property
    def num_params(self) -> int:
        w = self.widths
        return sum(w[i + 1] * (w[i] + 1) for i in range(len(w) - 1))

    def topology(self) -> "Topology":
        return Topology.layered(self.input_dim, self.hidden_layers)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "num_classes": self.num_classes,
            "output_mapping": self.output_mapping.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        allowed = {"input_dim", "hidden_layers", "num_classes", "output_mapping", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple(d["hidden_layers"]),
            num_classes=int(d["num_classes"]),
            output_mapping=OutputMapping(d.get("output_mapping", "plus_minus_one")),
            seed=int(d.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def parse_shape(cls, shape: str, **kw) -> "NetworkSpec":
        """``"3-2-2"`` -> input 3, one hidden layer of 2, 2 classes."""
        try:
            dims = [int(s) for s in shape.split("-")]
        except ValueError as exc:
            raise ValueError(f"bad shape string {shape!r}") from exc
        if len(dims) < 3:
            raise ValueError(f"shape {shape!r} needs input, >=1 hidden and output sizes")
        return cls(dims[0], tuple(dims[1:-1]), dims[-1], **kw)


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Hashable, ...]
    parents: Mapping[Hashable, tuple[Hashable, ...]]
    children: Mapping[Hashable, tuple[Hashable, ...]] = field(default=None)

    def __post_init__(self):
        for n, ps in self.parents.items():
            if n not in self.nodes:
                raise TopologyError(f"unknown node {n!r}")
            for p in ps:
                if p not in self.nodes:
                    raise TopologyError(f"unknown parent {p!r} of {n!r}")
        kids: dict = {n: [] for n in self.nodes}
        for n in self.nodes:
            for p in self.parents.get(n, ()):
                kids[p].append(n)
        derived = {n: tuple(c) for n, c in kids.items()}
        if self.children is not None and {n: tuple(self.children.get(n, ())) for n in self.nodes} != derived:
            raise TopologyError("parents and children adjacencies disagree")
        object.__setattr__(self, "children", derived)
        object.__setattr__(self, "parents", {n: tuple(self.parents.get(n, ())) for n in self.nodes})

    @classmethod
    def from_edges(cls, edges: Sequence[tuple[Hashable, Hashable]]) -> "Topology":
        nodes: list = []
        parents: dict = {}
        for a, b in edges:
            for n in (a, b):
                if n not in parents:
                    parents[n] = []
                    nodes.append(n)
            parents[b].append(a)
        return cls(tuple(nodes), {n: tuple(p) for n, p in parents.items()})

    @classmethod
    def layered(cls, input_dim: int, hidden_layers: Sequence[int]) -> "Topology":
        """Fully connected layers; node ids are ``("x", j)``, ``("h", k, i)`` and ``"y"``."""
        layers = [[("x", j) for j in range(input_dim)]]
        for k, w in enumerate(hidden_layers):
            layers.append([("h", k, i) for i in range(w)])
        layers.append(["y"])
        nodes = tuple(n for layer in layers for n in layer)
        parents = {n: () for n in layers[0]}
        for prev, layer in zip(layers, layers[1:]):
            for n in layer:
                parents[n] = tuple(prev)
        return cls(nodes, parents)

    def with_edge(self, src, dst) -> "Topology":
        parents = dict(self.parents)
        parents[dst] = parents[dst] + (src,)
        return Topology(self.nodes, parents)

    def topological_order(self) -> list:
        ts = graphlib.TopologicalSorter({n: self.parents[n] for n in self.nodes})
        try:
            order = list(ts.static_order())
        except graphlib.CycleError as exc:
            raise TopologyError(f"graph has a cycle: {exc.args[1]}") from exc
        rank = {n: i for i, n in enumerate(self.nodes)}
        # static_order is deterministic but not stable w.r.t. declaration order
        depth: dict = {}
        for n in order:
            depth[n] = 1 + max((depth[p] for p in self.parents[n]), default=-1)
        return sorted(order, key=lambda n: (depth[n], rank[n]))

    def descendants(self, node) -> set:
        seen: set = set()
        stack = list(self.children[node])
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.children[n])
        return seen


@dataclass(frozen=True)
class AssumptionCheck:
    ok: bool
    node: Hashable = None
    witness: Hashable = None

    def __bool__(self):
        return self.ok


def validate_assumption1(topology: Topology) -> AssumptionCheck:
    """Check that no parent of a node's children is also its descendant.

    Returns the first violating node (in topological order) together with one
    witness from the offending intersection. A cyclic graph raises
    ``TopologyError`` instead.
    """
    order = topology.topological_order()
    position = {n: i for i, n in enumerate(order)}
    for node in order:
        co_parents = {p for c in topology.children[node] for p in topology.parents[c]}
        bad = co_parents & topology.descendants(node)
        if bad:
            return AssumptionCheck(False, node, min(bad, key=position.__getitem__))
    return AssumptionCheck(True)
