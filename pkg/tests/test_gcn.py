import math

import numpy as np
import pytest

from gcn_cert import gcn
from gcn_cert.gcn import GcnParams, cross_entropy, forward_sliced, glorot_params, load_checkpoint, predict, save_checkpoint
from gcn_cert.graph_core import Graph, build_message_passing, slice_problem

from conftest import random_tiny_graph


def _single_node_problem(D=1):
    g = Graph(
        num_nodes=1,
        num_features=D,
        num_classes=2,
        adjacency=np.zeros((1, 1)),
        attributes=np.ones((1, D)),
    )
    return slice_problem(g, build_message_passing(g), 0, 3)


def test_forward_zero_params_gives_zero_logits():
    sp = _single_node_problem()
    params = GcnParams([np.zeros((1, 2)), np.zeros((2, 2))], [np.zeros(2), np.zeros(2)])
    assert np.array_equal(forward_sliced(sp, params).logits, [0.0, 0.0])


def test_forward_bias_only_net():
    sp = _single_node_problem()
    b2 = np.array([0.3, -0.7])
    params = GcnParams([np.zeros((1, 2)), np.zeros((2, 2))], [np.array([1.0, -1.0]), b2])
    np.testing.assert_allclose(forward_sliced(sp, params).logits, b2)


def test_forward_hand_example():
    sp = _single_node_problem()
    params = GcnParams(
        [np.array([[2.0]]), np.array([[1.0, -1.0]])],
        [np.array([-1.0]), np.zeros(2)],
    )
    trace = forward_sliced(sp, params)
    np.testing.assert_allclose(trace.pre_activations[0], [[1.0]])
    np.testing.assert_allclose(trace.logits, [1.0, -1.0])


def test_forward_is_pure(rng):
    graph, params, _ = random_tiny_graph(rng)
    mp = build_message_passing(graph)
    sp = slice_problem(graph, mp, 0, 3)
    a = forward_sliced(sp, params).logits
    b = forward_sliced(sp, params).logits
    assert np.array_equal(a, b)


def test_forward_rejects_bad_override_shape():
    sp = _single_node_problem(D=2)
    params = glorot_params([2, 2, 2])
    with pytest.raises(ValueError, match="attrs_override"):
        forward_sliced(sp, params, attrs_override=np.zeros((2, 2)))


def test_predict_values_and_ties():
    assert predict(np.array([3.0, 1.0])) == 0
    assert predict(np.array([0.0, 0.0])) == 0
    assert predict(np.array([-1.0, 2.0, 0.0])) == 1


def test_predict_shift_invariance(rng):
    for _ in range(50):
        logits = rng.normal(size=4)
        assert predict(logits) == predict(logits + 17.3)


def test_predict_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        predict(np.array([np.nan, 0.0]))


def test_cross_entropy_values():
    assert float(cross_entropy(np.array([0.0, 0.0]), 0)) == pytest.approx(math.log(2.0))
    assert float(cross_entropy(np.array([1000.0, 0.0]), 0)) < 1e-9
    assert float(cross_entropy(np.array([1.0, 2.0, 3.0]), 2)) == pytest.approx(0.407606, abs=1e-6)
    with pytest.raises(ValueError, match="label"):
        cross_entropy(np.array([0.0, 0.0]), 2)


def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    params = glorot_params([5, 4, 3], seed=7)
    for b in params.biases:
        b += rng.normal(size=b.shape)
    path = tmp_path / "model.json"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    for a, b in zip(params.weights + params.biases, loaded.weights + loaded.biases):
        assert np.array_equal(a, b)  # bit-exact via hex floats


def test_params_validation():
    with pytest.raises(ValueError):
        GcnParams([np.zeros((2, 3))], [np.zeros(2)]).validate()
    with pytest.raises(ValueError):
        GcnParams([np.zeros((2, 3)), np.zeros((4, 2))], [np.zeros(3), np.zeros(2)]).validate()
    with pytest.raises(ValueError, match="non-finite"):
        GcnParams([np.full((1, 1), np.nan)], [np.zeros(1)]).validate()
    assert glorot_params([3, 2, 2]).dims == [3, 2, 2]
    assert glorot_params([3, 2, 2]).layer_count == 3


def test_dropout_zeroes_activations():
    sp = _single_node_problem()
    params = GcnParams(
        [np.array([[2.0]]), np.array([[1.0, -1.0]])],
        [np.array([1.0]), np.zeros(2)],
    )
    clean = forward_sliced(sp, params).logits
    dropped = forward_sliced(sp, params, dropout_rate=0.9999, dropout_rng=np.random.default_rng(0)).logits
    assert not np.allclose(clean, dropped)
    assert np.allclose(dropped, 0.0)
