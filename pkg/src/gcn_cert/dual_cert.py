"""Dual lower bounds on the worst-case class margin, and certificates.

The dual objective g is evaluated by a backward pass through the sliced
GCN (dual tensors Phi / Phi_hat), followed by a closed-form choice of the
budget duals (eta, rho).  Any feasible (Omega, eta, rho) makes g a valid
lower bound on the exact worst-case margin, so a positive value for every
competing class certifies robustness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .bounds import ActivationBounds, Budget, compute_bounds
from .gcn import GcnParams
from .graph_core import SlicedProblem

__all__ = [
    "DualState",
    "MarginVector",
    "Certificate",
    "default_omega",
    "backward_phi",
    "closed_form_eta_rho",
    "evaluate_dual",
    "dual_state",
    "optimize_omega",
    "margin_vector",
    "certify",
    "class_vector",
]

ROBUST = "robust"
NON_ROBUST = "non_robust"
UNDECIDED = "undecided"

# projected-gradient-ascent defaults for Omega
PGA_STEPS = 200
PGA_STEP_SIZE = 0.05
PGA_STEP_SHRINK = 0.5
PGA_MIN_STEP = 1e-12


@dataclass
class DualState:
    """One dual evaluation for a single (target node, class pair)."""

    omega: dict
    eta: np.ndarray
    rho: float
    phi: dict
    phi_hat: dict
    delta: np.ndarray
    psi: np.ndarray
    value: float
    s_q: list
    c: np.ndarray


@dataclass
class MarginVector:
    """Negated dual bounds per class; entry y is exactly zero."""

    entries: np.ndarray
    y: int

    def certified_robust(self) -> bool:
        others = np.delete(self.entries, self.y)
        return bool(others.size == 0 or np.max(others) < 0)


@dataclass
class Certificate:
    node: int
    budget: Budget
    y_star: int
    dual_lower: np.ndarray
    primal_margins: np.ndarray | None
    status: str


def class_vector(y_star: int, y: int, num_classes: int) -> np.ndarray:
    c = np.zeros(num_classes)
    c[y_star] += 1.0
    c[y] -= 1.0
    return c


def default_omega(bounds: ActivationBounds) -> dict:
    """Omega = S / (S - R) on crossing entries, zero elsewhere.

    Grad-aware: when the bounds carry Vars (robust training), the default
    Omega is itself a function of the parameters and gradients flow
    through it.
    """
    omega = {}
    for l in bounds.layers():
        slope, _, _ = _envelope_slope(bounds, l)
        omega[l] = slope
    return omega


def _envelope_slope(bounds: ActivationBounds, layer: int):
    """S/(S-R) on crossing entries (safe elsewhere), as a grad-aware pair."""
    R, S = bounds.lower[layer], bounds.upper[layer]
    cross = bounds.crossing_mask(layer)
    denom = (S - R) * cross + (1.0 - cross)
    return (S * cross) / denom, denom, cross


def backward_phi(sp: SlicedProblem, params: GcnParams, bounds: ActivationBounds, omega: dict, c):
    """Dual backward pass; returns (phi, phi_hat, delta) keyed by layer."""
    L = sp.layer_count
    c = np.asarray(c, dtype=np.float64)
    phi = {L: -c.reshape(1, -1)}
    phi_hat = {}
    for l in range(L - 1, 0, -1):
        A_dot = sp.sliced_mp[l - 1]
        W = params.weights[l - 1]
        phi_hat[l] = grad.matmul(grad.matmul(A_dot.T, phi[l + 1]), grad.transpose(W))
        if l >= 2:
            slope, _, cross = _envelope_slope(bounds, l)
            nonneg = bounds.nonneg_mask(l)
            crossing_part = slope * grad.pos(phi_hat[l]) - omega[l] * cross * grad.negpart(phi_hat[l])
            phi[l] = nonneg * phi_hat[l] + cross * crossing_part
    X = sp.sliced_attrs
    delta = grad.pos(phi_hat[1]) * (1.0 - X) + grad.negpart(phi_hat[1]) * X
    return phi, phi_hat, delta


def closed_form_eta_rho(delta, budget: Budget):
    """Optimal (eta, rho) for fixed Omega, plus the selected index sets.

    Returns (eta, rho, s_q, info) where s_q is the list of (node, feature)
    pairs holding the Q largest budget-feasible delta entries, and info
    carries the flat indices needed to rebuild eta/rho differentiably.
    """
    delta_v = grad.val(delta)
    n, D = delta_v.shape
    q = budget.effective_q(D)
    Q = budget.effective_Q(n, D)
    if q == 0 or Q == 0:
        return np.zeros(n), 0.0, [], {"o_idx": None, "rho_idx": None, "q": q, "Q": Q}

    cols = np.tile(np.arange(D), (n, 1))
    order = np.lexsort((cols, -delta_v), axis=1)
    top_q = order[:, :q]  # per-row selected features, descending value
    rows = np.repeat(np.arange(n), q)
    feats = top_q.ravel()
    vals = delta_v[rows, feats]
    global_order = np.lexsort((feats, rows, -vals))
    chosen = global_order[:Q]
    s_q = [(int(rows[i]), int(feats[i])) for i in chosen]
    rho_pos = chosen[-1]
    rho = float(vals[rho_pos])
    # smallest of each row's top-q values (last column of the sorted block)
    o_idx = np.arange(n) * D + top_q[:, q - 1]
    o = delta_v.ravel()[o_idx]
    eta = np.maximum(0.0, o - rho)
    info = {
        "o_idx": o_idx,
        "rho_idx": int(rows[rho_pos]) * D + int(feats[rho_pos]),
        "q": q,
        "Q": Q,
    }
    return eta, rho, s_q, info


def evaluate_dual(sp, params, bounds, omega, eta, rho, c, phi=None, phi_hat=None, delta=None, budget=None):
    """Dual objective g for given (Omega, eta, rho); grad-aware.

    If the backward tensors are not supplied they are recomputed with the
    same Omega and c.  `budget` supplies the q/Q weights of the penalty
    terms; with an empty effective budget the box-penalty term vanishes.
    """
    if phi is None or phi_hat is None or delta is None:
        phi, phi_hat, delta = backward_phi(sp, params, bounds, omega, c)
    L = sp.layer_count
    X = sp.sliced_attrs
    n, D = X.shape
    q = budget.effective_q(D) if budget is not None else 0
    Q = budget.effective_Q(n, D) if budget is not None else 0

    g = 0.0
    for l in bounds.layers():
        R, S = bounds.lower[l], bounds.upper[l]
        _, denom, cross = _envelope_slope(bounds, l)
        coef = (S * R * cross) / denom
        g = g + grad.total(coef * grad.pos(phi_hat[l]))
    for l in range(1, L):
        g = g - grad.total(phi[l + 1] * params.biases[l - 1])
    g = g - grad.total(X * phi_hat[1])

    if q > 0 and Q > 0:
        eta_col = grad.expand_dims(eta, 1) if grad.is_var(eta) else np.asarray(eta).reshape(-1, 1)
        psi = grad.relu(delta - eta_col - rho)
        g = g - grad.total(psi)
        g = g - q * grad.total(eta) - Q * grad.total(rho)
    else:
        psi = np.zeros_like(grad.val(delta))
    return g, psi


def dual_state(sp, params, bounds, budget, c, omega=None) -> DualState:
    """Full dual evaluation with closed-form (eta, rho); numeric output."""
    if omega is None:
        omega = default_omega(bounds)
    phi, phi_hat, delta = backward_phi(sp, params, bounds, omega, c)
    eta, rho, s_q, _ = closed_form_eta_rho(delta, budget)
    g, psi = evaluate_dual(
        sp, params, bounds, omega, eta, rho, c, phi=phi, phi_hat=phi_hat, delta=delta, budget=budget
    )
    return DualState(
        omega={l: grad.val(om).copy() for l, om in omega.items()},
        eta=np.asarray(eta, dtype=np.float64),
        rho=float(rho),
        phi={l: grad.val(p) for l, p in phi.items()},
        phi_hat={l: grad.val(p) for l, p in phi_hat.items()},
        delta=grad.val(delta),
        psi=grad.val(psi),
        value=float(grad.val(g)),
        s_q=s_q,
        c=np.asarray(c, dtype=np.float64),
    )


def dual_value_differentiable(sp, params, bounds, budget, c, omega):
    """g as a grad.Var when params, bounds or omega carry Vars."""
    phi, phi_hat, delta = backward_phi(sp, params, bounds, omega, c)
    _, _, _, info = closed_form_eta_rho(grad.val(delta), budget)
    if info["o_idx"] is None:
        eta, rho = np.zeros(grad.val(delta).shape[0]), 0.0
    else:
        flat_rho = grad.gather(delta, [info["rho_idx"]])
        o = grad.gather(delta, info["o_idx"])
        mask = (grad.val(o) - grad.val(flat_rho) > 0).astype(np.float64)
        eta = (o - flat_rho) * mask
        rho = flat_rho
    g, _ = evaluate_dual(
        sp, params, bounds, omega, eta, rho, c, phi=phi, phi_hat=phi_hat, delta=delta, budget=budget
    )
    return g


def optimize_omega(sp, params, bounds, budget, c, steps=PGA_STEPS, step_size=PGA_STEP_SIZE) -> DualState:
    """Monotone projected gradient ascent on Omega.

    Each step moves from the best iterate so far with closed-form (eta,
    rho); the step size is halved whenever the move does not improve g
    (backtracking), so the result converges to a local maximum and never
    degrades the default-Omega start.
    """
    best_om = {l: grad.val(om).copy() for l, om in default_omega(bounds).items()}
    best = dual_state(sp, params, bounds, budget, c, omega=best_om)
    lr = step_size
    for _ in range(steps):
        om_vars = {l: grad.Var(best_om[l]) for l in best_om}
        g = dual_value_differentiable(sp, params, bounds, budget, c, om_vars)
        if not grad.is_var(g):
            break  # no crossing entries: g does not depend on Omega
        grad.backward(g)
        cand_om = {}
        moved = False
        for l in best_om:
            dg = om_vars[l].grad
            if dg is None:
                cand_om[l] = best_om[l]
                continue
            cross = bounds.crossing_mask(l)
            cand_om[l] = np.clip(best_om[l] + lr * dg * cross, 0.0, 1.0)
            moved = True
        if not moved:
            break
        cand = dual_state(sp, params, bounds, budget, c, omega=cand_om)
        if cand.value > best.value + 1e-15:
            best, best_om = cand, cand_om
        else:
            lr *= PGA_STEP_SHRINK
            if lr < PGA_MIN_STEP:
                break
    return best


def margin_vector(sp, params, bounds, budget, y, mode="default") -> MarginVector:
    """p_k = -g(c^k) with c^k = e_y - e_k; p_y = 0 exactly."""
    K = grad.val(params.weights[-1]).shape[1]
    if not (0 <= y < K):
        raise ValueError(f"class {y} out of range [0, {K})")
    entries = np.zeros(K)
    for k in range(K):
        if k == y:
            continue
        c = class_vector(y, k, K)
        if mode == "optimized":
            st = optimize_omega(sp, params, bounds, budget, c)
        else:
            st = dual_state(sp, params, bounds, budget, c)
        entries[k] = -st.value
    return MarginVector(entries=entries, y=y)


def certify(sp, params, budget, y_star, mode="default") -> Certificate:
    """Robust / non-robust / undecided status for one target node."""
    from . import primal_attack

    K = grad.val(params.weights[-1]).shape[1]
    bnds = compute_bounds(sp, params, budget)
    dual_lower = np.zeros(K)
    states = {}
    for k in range(K):
        if k == y_star:
            continue
        c = class_vector(y_star, k, K)
        if mode == "optimized":
            st = optimize_omega(sp, params, bnds, budget, c)
        else:
            st = dual_state(sp, params, bnds, budget, c)
        states[k] = st
        dual_lower[k] = st.value
    others = [dual_lower[k] for k in range(K) if k != y_star]
    if not others or min(others) > 0:
        return Certificate(sp.target, budget, y_star, dual_lower, None, ROBUST)
    primal = np.zeros(K)
    for k, st in states.items():
        primal[k] = primal_attack.construct_and_evaluate(sp, params, st, budget, y_star, k)
    status = NON_ROBUST if min(primal[k] for k in states) < 0 else UNDECIDED
    return Certificate(sp.target, budget, y_star, dual_lower, primal, status)
