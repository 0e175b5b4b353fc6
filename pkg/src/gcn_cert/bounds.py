"""Pre-activation interval bounds and the crossing/linear neuron partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .gcn import GcnParams
from .graph_core import SlicedProblem

__all__ = [
    "Budget",
    "ActivationBounds",
    "CROSSING",
    "NONNEG",
    "NONPOS",
    "first_layer_bounds",
    "deeper_layer_bounds",
    "classify_partition",
    "compute_bounds",
]

CROSSING = 0
NONNEG = 1
NONPOS = 2


@dataclass(frozen=True)
class Budget:
    """Per-node (q) and global (Q) L0 flip budgets."""

    local_q: int
    global_Q: int

    def __post_init__(self):
        if self.local_q < 0 or self.global_Q < 0:
            raise ValueError("budgets must be nonnegative")

    def effective_q(self, num_features: int) -> int:
        return min(self.local_q, num_features)

    def effective_Q(self, num_nodes: int, num_features: int) -> int:
        # more than q flips per node can never be used; same for N*q overall
        return min(self.global_Q, num_nodes * self.effective_q(num_features))


@dataclass
class ActivationBounds:
    """Lower/upper pre-activation bounds per layer l = 2..L-1.

    lower[l] / upper[l] / partition[l] are indexed by layer number.
    Bound matrices may be grad.Var during training; partitions are plain
    int arrays computed from the forward values.
    """

    lower: dict
    upper: dict
    partition: dict

    def crossing_mask(self, layer: int) -> np.ndarray:
        return (self.partition[layer] == CROSSING).astype(np.float64)

    def nonneg_mask(self, layer: int) -> np.ndarray:
        return (self.partition[layer] == NONNEG).astype(np.float64)

    def layers(self):
        return sorted(self.lower.keys())


def _topk_sum_rows(values: np.ndarray, k: int):
    """Indices of the k largest entries per row, ties by ascending column."""
    n, d = values.shape
    cols = np.tile(np.arange(d), (n, 1))
    order = np.lexsort((cols, -values), axis=1)
    return order[:, :k]


def first_layer_bounds(sp: SlicedProblem, params: GcnParams, budget: Budget):
    """Tight bounds (R^(2), S^(2)) on the first hidden pre-activations.

    Per entry (m, j), the bound is the clean pre-activation plus/minus the
    sum of the Q largest admissible per-flip changes; each flip candidate
    for neighbor n is one of the q largest per-feature effects.  All
    selections are frozen index masks, so the result is differentiable in
    the parameters under the fixed-mask convention.
    """
    X = sp.sliced_attrs
    A1 = sp.sliced_mp[0]
    W, b = params.weights[0], params.biases[0]
    n_outer, D = X.shape
    M = A1.shape[0]
    h2 = grad.val(W).shape[1]

    q = budget.effective_q(D)
    Q = budget.effective_Q(n_outer, D)

    H_dot = grad.matmul(grad.matmul(A1, X), W) + b
    if q == 0 or Q == 0:
        return H_dot, H_dot

    Wp, Wm = grad.pos(W), grad.negpart(W)
    # per-flip effect of toggling X[n, d] on hidden dim j, always >= 0
    up = grad.expand_dims(1.0 - X, 2) * grad.expand_dims(Wp, 0) + grad.expand_dims(X, 2) * grad.expand_dims(Wm, 0)
    down = grad.expand_dims(X, 2) * grad.expand_dims(Wp, 0) + grad.expand_dims(1.0 - X, 2) * grad.expand_dims(Wm, 0)

    upper = _budgeted_increase(A1, up, q, Q, n_outer, D, M, h2)
    lower = _budgeted_increase(A1, down, q, Q, n_outer, D, M, h2)
    return H_dot - lower, H_dot + upper


def _budgeted_increase(A1, effect, q, Q, n_outer, D, M, h2):
    """Sum of the top-Q of {A1[m,n] * (q-largest effects of row n)} per (m,j)."""
    eff_val = grad.val(effect)  # (n_outer, D, h2)
    A1_val = grad.val(A1)
    # q-largest effect features per (n, j), ties by ascending feature id
    sel_mask = np.zeros((n_outer, D, h2))
    for j in range(h2):
        idx = _topk_sum_rows(eff_val[:, :, j], q)
        np.put_along_axis(sel_mask[:, :, j], idx, 1.0, axis=1)

    # candidate values A1[m,n] * eff[n,d,j] for selected (n,d); pick top Q
    # per (m,j) with ties by ascending (node, feature)
    cand = A1_val[:, :, None, None] * eff_val[None, :, :, :] * sel_mask[None, :, :, :]
    flat = cand.reshape(M, n_outer * D, h2)
    keep = np.zeros_like(flat)
    sel_flat = np.broadcast_to(sel_mask.reshape(1, n_outer * D, h2), flat.shape)
    for m in range(M):
        for j in range(h2):
            valid = np.flatnonzero(sel_flat[m, :, j])
            if valid.size == 0:
                continue
            vals = flat[m, valid, j]
            order = np.lexsort((valid, -vals))
            keep[m, valid[order[:Q]], j] = 1.0

    keep4 = keep.reshape(M, n_outer, D, h2)
    contrib = grad.expand_dims(effect, 0) * (keep4 * A1_val[:, :, None, None])
    return grad.asum(contrib, axis=(1, 2))


def deeper_layer_bounds(lower_prev, upper_prev, A_dot, W, b):
    """Interval propagation to the next layer.

    Inputs are the previous layer's pre-activation bounds; they are
    clamped through the ReLU before propagating, and the bias shifts both
    ends of the interval.
    """
    Rbar = grad.relu(lower_prev)
    Sbar = grad.relu(upper_prev)
    Wp, Wm = grad.pos(W), grad.negpart(W)
    lower = grad.matmul(A_dot, grad.matmul(Rbar, Wp) - grad.matmul(Sbar, Wm)) + b
    upper = grad.matmul(A_dot, grad.matmul(Sbar, Wp) - grad.matmul(Rbar, Wm)) + b
    return lower, upper


def classify_partition(lower, upper) -> np.ndarray:
    """Per-entry tags; R=S=0 counts as nonpos, R=S!=0 is exact (never crossing)."""
    R, S = grad.val(lower), grad.val(upper)
    if np.any(R > S + 1e-12):
        raise ValueError("lower bound exceeds upper bound")
    tags = np.full(R.shape, CROSSING, dtype=np.int8)
    tags[R >= 0] = NONNEG
    tags[S <= 0] = NONPOS
    return tags


def compute_bounds(sp: SlicedProblem, params: GcnParams, budget: Budget) -> ActivationBounds:
    """Bounds and partition for every hidden layer l = 2..L-1."""
    L = sp.layer_count
    lower, upper, partition = {}, {}, {}
    R, S = first_layer_bounds(sp, params, budget)
    lower[2], upper[2] = R, S
    partition[2] = classify_partition(R, S)
    for l in range(3, L):
        R, S = deeper_layer_bounds(R, S, sp.sliced_mp[l - 2], params.weights[l - 2], params.biases[l - 2])
        lower[l], upper[l] = R, S
        partition[l] = classify_partition(R, S)
    return ActivationBounds(lower=lower, upper=upper, partition=partition)
