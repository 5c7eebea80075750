from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hnca.core import (
    NetworkSpec,
    OutputMapping,
    RngStream,
    Topology,
    TopologyError,
    UnitParams,
    glorot_init,
    log_sigmoid,
    log_softmax,
    sigmoid,
    sigmoid_prime,
    softmax,
    validate_assumption1,
)


# ---------------------------------------------------------------- numerics


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(0.5) == pytest.approx(1.0 / (1.0 + math.exp(-0.5)), abs=1e-15)
    assert sigmoid(0.5) == pytest.approx(0.6224593, abs=1e-7)
    assert sigmoid_prime(0.0) == 0.25


def test_sigmoid_saturates_without_nan():
    out = sigmoid(np.array([-1e4, -800.0, 800.0, 1e4]))
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[-1] == 1.0


@given(st.floats(-700, 700, allow_nan=False))
def test_sigmoid_symmetry(l):
    assert abs(sigmoid(l) + sigmoid(-l) - 1.0) <= 1e-15


@given(st.floats(-50, 50, allow_nan=False))
def test_log_sigmoid_matches_log1p_form(l):
    ref = -math.log1p(math.exp(-l)) if l >= 0 else l - math.log1p(math.exp(l))
    assert log_sigmoid(l) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_array_equal(softmax([1000.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12))
def test_softmax_is_a_distribution(l):
    p = softmax(np.array(l))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(np.exp(log_softmax(np.array(l))), p, atol=1e-12)


# ---------------------------------------------------------------- rng and init


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(7, 2).generator().random(5)
    b = RngStream(7, 2).generator().random(5)
    c = RngStream(7, 3).generator().random(5)
    d = RngStream(7, 2).child(1).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


@pytest.mark.parametrize("fan_in,fan_out,bound", [(64, 64, 0.3062), (1, 1, math.sqrt(3.0))])
def test_glorot_bounds(fan_in, fan_out, bound):
    p = glorot_init(fan_in, fan_out, RngStream(0, 0))
    assert p.weights.shape == (fan_out, fan_in)
    assert np.all(np.abs(p.weights) <= bound + 1e-4)
    np.testing.assert_array_equal(p.bias, 0.0)


def test_glorot_deterministic():
    a = glorot_init(5, 3, RngStream(1, 4))
    b = glorot_init(5, 3, RngStream(1, 4))
    np.testing.assert_array_equal(a.weights, b.weights)


def test_glorot_rejects_empty():
    with pytest.raises(ValueError):
        glorot_init(0, 3, RngStream(0))


def test_unit_params_validation():
    with pytest.raises(TopologyError):
        UnitParams(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(TopologyError):
        UnitParams(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        UnitParams(np.array([1.0, np.nan]), 0.0)
    p = UnitParams(np.arange(6.0).reshape(2, 3), [1.0, 2.0])
    assert p.fan_in == 3
    assert p.unit(1).bias == 2.0


# ---------------------------------------------------------------- network spec


def test_network_spec_invariants():
    with pytest.raises(ValueError):
        NetworkSpec(0, (2,), 2)
    with pytest.raises(ValueError):
        NetworkSpec(3, (0,), 2)
    with pytest.raises(ValueError):
        NetworkSpec(3, (2,), 1)


def test_network_spec_json_round_trip():
    spec = NetworkSpec(784, (64,), 10, OutputMapping.ZERO_ONE, seed=5)
    doc = json.loads(spec.to_json())
    assert doc == {"input_dim": 784, "hidden_layers": [64], "num_classes": 10,
                   "output_mapping": "zero_one", "seed": 5}
    assert NetworkSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ValueError):
        NetworkSpec.from_dict({**doc, "hidden": [3]})


def test_parse_shape_and_param_count():
    spec = NetworkSpec.parse_shape("4-3-3-3")
    assert spec.hidden_layers == (3, 3)
    assert spec.num_params == 3 * 5 + 3 * 4 + 3 * 4
    with pytest.raises(ValueError):
        NetworkSpec.parse_shape("4-3")


# ---------------------------------------------------------------- topology


def test_assumption1_examples():
    assert validate_assumption1(Topology.from_edges([("A", "B"), ("B", "C")]))
    tri = validate_assumption1(Topology.from_edges([("A", "B"), ("B", "C"), ("A", "C")]))
    assert not tri
    assert (tri.node, tri.witness) == ("A", "B")


def test_cycle_is_structural_error():
    with pytest.raises(TopologyError):
        validate_assumption1(Topology.from_edges([("A", "B"), ("B", "A")]))


def test_inconsistent_adjacency_rejected():
    with pytest.raises(TopologyError):
        Topology(("a", "b"), {"b": ("a",)}, children={"a": (), "b": ()})


layered_shapes = st.tuples(
    st.integers(1, 4), st.lists(st.integers(1, 4), min_size=1, max_size=4)
)


@given(layered_shapes)
def test_layered_topologies_satisfy_assumption1(shape):
    d, hidden = shape
    topo = NetworkSpec(d, tuple(hidden), 2).topology()
    assert validate_assumption1(topo)
    # children/parents consistency
    for n in topo.nodes:
        for c in topo.children[n]:
            assert n in topo.parents[c]


@settings(max_examples=60)
@given(layered_shapes, st.data())
def test_skip_edge_violates_assumption1(shape, data):
    d, hidden = shape
    if len(hidden) < 2:
        hidden = hidden + [2]
    topo = Topology.layered(d, hidden)
    # edge from layer k to layer k+2 bypasses layer k+1; layer -1 is the input
    k = data.draw(st.integers(-1, len(hidden) - 2))
    src_layer = [("x", j) for j in range(d)] if k < 0 else [("h", k, i) for i in range(hidden[k])]
    src = data.draw(st.sampled_from(src_layer))
    dst_layer = ["y"] if k + 2 == len(hidden) else [("h", k + 2, i) for i in range(hidden[k + 2])]
    dst = data.draw(st.sampled_from(dst_layer))
    res = validate_assumption1(topo.with_edge(src, dst))
    assert not res
    assert res.node == src
    assert res.witness in {("h", k + 1, i) for i in range(hidden[k + 1])}
