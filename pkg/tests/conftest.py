"""Shared fixtures: tiny random instances and small hand-built graphs."""

import numpy as np
import pytest

from gcn_cert import gcn
from gcn_cert.bounds import Budget
from gcn_cert.graph_core import Graph, build_message_passing, slice_problem


def random_tiny_graph(rng, all_labeled=False):
    """Random graph small enough for exhaustive oracles (2-hop nbhd <= 6)."""
    n = int(rng.integers(3, 7))
    D = int(rng.integers(2, 6))
    K = int(rng.integers(2, 4))
    A = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    A = A + A.T
    X = (rng.random((n, D)) < 0.5).astype(float)
    labels = rng.integers(0, K, size=n)
    if not all_labeled:
        labels[rng.random(n) < 0.4] = -1
        labels[0] = rng.integers(0, K)
    graph = Graph(
        num_nodes=n,
        num_features=D,
        num_classes=K,
        adjacency=A,
        attributes=X,
        labels=labels,
    )
    budget = Budget(int(rng.integers(1, 3)), int(rng.integers(1, 4)))
    hidden = int(rng.integers(2, 5))
    params = gcn.glorot_params([D, hidden, K], seed=int(rng.integers(2**31)))
    # nonzero biases keep pre-activations off the exact ReLU kink
    for b in params.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    return graph, params, budget


def random_tiny_instance(rng, all_labeled=False):
    graph, params, budget = random_tiny_graph(rng, all_labeled=all_labeled)
    mp = build_message_passing(graph)
    target = int(rng.integers(graph.num_nodes))
    spr = slice_problem(graph, mp, target, 3)
    return spr, params, budget


def path_graph():
    """Path 0 - 1 - 2 with two binary features."""
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    X = np.array([[1, 0], [0, 1], [1, 1]], dtype=float)
    return Graph(
        num_nodes=3,
        num_features=2,
        num_classes=2,
        adjacency=A,
        attributes=X,
        labels=np.array([0, 1, -1]),
    )


@pytest.fixture
def path():
    return path_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
