"""Graph data model, GCN message-passing matrices, per-target slicing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = ["Graph", "MessagePassing", "SlicedProblem", "build_message_passing", "slice_problem"]

# below this size the normalized adjacency is kept dense (perf only)
_DENSE_CUTOFF = 64

LABELED = "labeled"
UNLABELED = "unlabeled"


@dataclass(frozen=True)
class Graph:
    """Attributed graph with binary adjacency and binary node attributes.

    adjacency: N x N symmetric binary, zero diagonal allowed.
    attributes: N x D binary.
    labels: optional int array of length N, -1 where unknown.
    split: optional array of "labeled"/"unlabeled" strings, length N.
    """

    num_nodes: int
    num_features: int
    num_classes: int
    adjacency: object  # scipy csr or dense ndarray
    attributes: object
    labels: np.ndarray | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        A = self.adjacency
        Ad = np.asarray(A.toarray() if sp.issparse(A) else A)
        if Ad.shape != (self.num_nodes, self.num_nodes):
            raise ValueError(f"adjacency shape {Ad.shape} != N={self.num_nodes}")
        if not np.array_equal(Ad, Ad.T):
            raise ValueError("adjacency must be symmetric")
        if not np.isin(Ad, (0, 1)).all():
            raise ValueError("adjacency must be binary")
        X = self.attributes
        Xd = np.asarray(X.toarray() if sp.issparse(X) else X)
        if Xd.shape != (self.num_nodes, self.num_features):
            raise ValueError(f"attributes shape {Xd.shape} != ({self.num_nodes}, {self.num_features})")
        if not np.isin(Xd, (0, 1)).all():
            raise ValueError("attributes must be binary")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            known = lab[lab >= 0]
            if known.size and (known.max() >= self.num_classes):
                raise ValueError("label out of range")

    def dense_adjacency(self) -> np.ndarray:
        A = self.adjacency
        return np.asarray(A.toarray() if sp.issparse(A) else A, dtype=np.float64)

    def dense_attributes(self) -> np.ndarray:
        X = self.attributes
        return np.asarray(X.toarray() if sp.issparse(X) else X, dtype=np.float64)

    def labeled_nodes(self) -> np.ndarray:
        if self.split is None:
            if self.labels is None:
                return np.array([], dtype=int)
            return np.flatnonzero(np.asarray(self.labels) >= 0)
        return np.flatnonzero(np.asarray(self.split) == LABELED)

    def unlabeled_nodes(self) -> np.ndarray:
        if self.split is None:
            if self.labels is None:
                return np.arange(self.num_nodes)
            return np.flatnonzero(np.asarray(self.labels) < 0)
        return np.flatnonzero(np.asarray(self.split) == UNLABELED)


@dataclass(frozen=True)
class MessagePassing:
    """Symmetrically normalized GCN propagation matrix, shared by all layers."""

    matrix: object  # N x N, csr or dense
    normalization: str = "gcn_sym"

    def dense(self) -> np.ndarray:
        M = self.matrix
        return np.asarray(M.toarray() if sp.issparse(M) else M, dtype=np.float64)

    def matrices(self, layer_count: int):
        """The L-1 (identical) per-layer propagation matrices."""
        return [self.matrix] * (layer_count - 1)


@dataclass(frozen=True)
class SlicedProblem:
    """Everything needed to evaluate one target node's output.

    hop_sets[k] lists (sorted ascending) the node ids reachable from the
    target within k hops, self included.  sliced_mp[l-1] has shape
    |hop_sets[L-l]| x |hop_sets[L-l+1]| for l = 1..L-1.
    """

    target: int
    layer_count: int
    sliced_mp: list = field(default_factory=list)
    sliced_attrs: np.ndarray = None
    hop_sets: list = field(default_factory=list)

    @property
    def neighborhood(self) -> np.ndarray:
        """Global node ids of the outermost hop set N_{L-1}(t)."""
        return self.hop_sets[-1]


def build_message_passing(graph: Graph) -> MessagePassing:
    """A_hat = D~^{-1/2} (A v I) D~^{-1/2} with self-loops merged."""
    A = graph.dense_adjacency()
    A_tilde = A.copy()
    np.fill_diagonal(A_tilde, 1.0)
    deg = A_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    A_hat = inv_sqrt[:, None] * A_tilde * inv_sqrt[None, :]
    if graph.num_nodes >= _DENSE_CUTOFF:
        return MessagePassing(sp.csr_array(A_hat))
    return MessagePassing(A_hat)


def _hop_sets(graph: Graph, target: int, layer_count: int):
    A = graph.dense_adjacency()
    N = graph.num_nodes
    reach = np.zeros(N, dtype=bool)
    reach[target] = True
    sets = [np.array([target], dtype=int)]
    for _ in range(layer_count - 1):
        reach = reach | (A[reach].sum(axis=0) > 0)
        sets.append(np.flatnonzero(reach))
    return sets


def slice_problem(graph: Graph, mp: MessagePassing, target: int, layer_count: int) -> SlicedProblem:
    """Restrict the GCN to the (L-1)-hop neighborhood of the target."""
    if not (0 <= target < graph.num_nodes):
        raise ValueError(f"target {target} out of range [0, {graph.num_nodes})")
    if layer_count < 2:
        raise ValueError("layer_count must be >= 2")
    hop_sets = _hop_sets(graph, target, layer_count)
    A_hat = mp.dense()
    sliced = []
    for l in range(1, layer_count):
        rows = hop_sets[layer_count - l - 1]
        cols = hop_sets[layer_count - l]
        sliced.append(A_hat[np.ix_(rows, cols)])
    X = graph.dense_attributes()
    attrs = X[hop_sets[-1], :]
    return SlicedProblem(
        target=target,
        layer_count=layer_count,
        sliced_mp=sliced,
        sliced_attrs=attrs,
        hop_sets=hop_sets,
    )
