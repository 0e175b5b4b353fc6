"""Independent verification machinery.

Everything here is a test fixture: brute-force enumeration of the exact
worst-case margin, the explicit linear program of the relaxation with its
auditable constraint-to-dual-variable naming, a dense two-phase simplex
solver (Bland's anti-cycling rule), and the optimality checks for the
closed-form budget duals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import gcn, grad
from .bounds import CROSSING, NONNEG, Budget
from .gcn import GcnParams
from .graph_core import SlicedProblem

__all__ = [
    "LpModel",
    "EnumerationResult",
    "SimplexError",
    "enumerate_exact_margin",
    "admissible_flip_count",
    "iter_admissible",
    "build_primal_lp",
    "solve_lp",
    "write_lp_text",
    "check_integrality",
    "check_eta_rho_optimality",
]

MAX_LP_VARIABLES = 300


class SimplexError(RuntimeError):
    pass


@dataclass
class LpModel:
    """min c^T x subject to A_eq x = b_eq, A_ub x <= b_ub, lo <= x <= hi."""

    var_names: list
    objective: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    eq_names: list = field(default_factory=list)
    ub_names: list = field(default_factory=list)

    @property
    def num_vars(self):
        return len(self.var_names)

    def index(self, name):
        if not hasattr(self, "_index"):
            self._index = {n: i for i, n in enumerate(self.var_names)}
        return self._index[name]


@dataclass
class EnumerationResult:
    exact_min_margin: float
    argmin_perturbation: np.ndarray
    count_enumerated: int


# ---------------------------------------------------------------------------
# brute-force enumeration


def admissible_flip_count(num_rows: int, num_features: int, budget: Budget) -> int:
    """|X_{q,Q}|: flip sets with <= q flips per row and <= Q in total."""
    q = budget.effective_q(num_features)
    Q = budget.effective_Q(num_rows, num_features)
    poly = np.zeros(Q + 1, dtype=object)
    poly[0] = 1
    for _ in range(num_rows):
        row = [comb(num_features, s) for s in range(min(q, Q) + 1)]
        nxt = np.zeros(Q + 1, dtype=object)
        for total in range(Q + 1):
            for s, ways in enumerate(row):
                if s > total:
                    break
                nxt[total] += poly[total - s] * ways
        poly = nxt
    return int(poly.sum())


def iter_admissible(num_rows: int, num_features: int, budget: Budget):
    """Yield admissible flip sets as tuples of (row, feature) pairs."""
    q = budget.effective_q(num_features)
    Q = budget.effective_Q(num_rows, num_features)

    def per_row_choices():
        out = [()]
        for s in range(1, q + 1):
            out.extend(itertools.combinations(range(num_features), s))
        return out

    choices = per_row_choices()

    def rec(row, remaining, acc):
        if row == num_rows:
            yield tuple(acc)
            return
        for ch in choices:
            if len(ch) > remaining:
                continue
            acc.extend((row, d) for d in ch)
            yield from rec(row + 1, remaining - len(ch), acc)
            del acc[len(acc) - len(ch):]

    yield from rec(0, Q, [])


def enumerate_exact_margin(
    sp: SlicedProblem, params: GcnParams, budget: Budget, y_star: int, y: int, guard: int = 10**6
) -> EnumerationResult:
    """Exact minimum margin over all admissible binary perturbations."""
    X = sp.sliced_attrs
    n, D = X.shape
    count = admissible_flip_count(n, D, budget)
    if count > guard:
        raise ValueError(
            f"enumeration refused: {count} admissible perturbations over "
            f"{n} nodes x {D} features exceeds the guard of {guard}"
        )
    best = np.inf
    best_x = X.copy()
    seen = 0
    for flips in iter_admissible(n, D, budget):
        seen += 1
        Xt = X.copy()
        for r, d in flips:
            Xt[r, d] = 1.0 - Xt[r, d]
        logits = grad.val(gcn.forward_sliced(sp, params, attrs_override=Xt).logits)
        margin = float(logits[y_star] - logits[y])
        if margin < best:
            best, best_x = margin, Xt
    return EnumerationResult(exact_min_margin=best, argmin_perturbation=best_x, count_enumerated=seen)


# ---------------------------------------------------------------------------
# explicit primal LP


def build_primal_lp(sp: SlicedProblem, params: GcnParams, bounds, budget: Budget, c) -> LpModel:
    """The relaxed certification problem as an explicit dense LP.

    Variables: the attribute block (= H^(1)), slack magnitudes eps, every
    pre-activation Hhat^(l), and post-activations H^(l) for crossing
    neurons only (the exactly-linear cases are substituted away).
    Constraint names record the dual variable owning each row.
    """
    L = sp.layer_count
    X = sp.sliced_attrs
    n_outer, D = X.shape
    K = grad.val(params.weights[-1]).shape[1]
    c = np.asarray(c, dtype=np.float64)

    names, lo, hi = [], [], []

    def add_var(name, low, high):
        names.append(name)
        lo.append(low)
        hi.append(high)
        return len(names) - 1

    x_idx = {(n, d): add_var(f"X_{n}_{d}", 0.0, 1.0) for n in range(n_outer) for d in range(D)}
    e_idx = {(n, d): add_var(f"eps_{n}_{d}", 0.0, np.inf) for n in range(n_outer) for d in range(D)}
    hhat_idx = {}
    for l in range(2, L + 1):
        rows = sp.sliced_mp[l - 2].shape[0]
        width = grad.val(params.weights[l - 2]).shape[1]
        for m in range(rows):
            for j in range(width):
                hhat_idx[(l, m, j)] = add_var(f"Hhat{l}_{m}_{j}", -np.inf, np.inf)
    h_idx = {}
    for l in range(2, L):
        part = bounds.partition[l]
        for m in range(part.shape[0]):
            for j in range(part.shape[1]):
                if part[m, j] == CROSSING:
                    h_idx[(l, m, j)] = add_var(f"H{l}_{m}_{j}", 0.0, np.inf)

    nv = len(names)
    if nv > MAX_LP_VARIABLES:
        raise ValueError(f"LP too large for the dense oracle: {nv} > {MAX_LP_VARIABLES} variables")

    a_eq, b_eq, eq_names = [], [], []
    a_ub, b_ub, ub_names = [], [], []

    # layer equalities (dual variables Phi)
    for l in range(2, L + 1):
        A_dot = sp.sliced_mp[l - 2]
        W = grad.val(params.weights[l - 2])
        b = grad.val(params.biases[l - 2])
        rows, width = A_dot.shape[0], W.shape[1]
        for m in range(rows):
            for j in range(width):
                row = np.zeros(nv)
                row[hhat_idx[(l, m, j)]] = 1.0
                for n in range(A_dot.shape[1]):
                    if A_dot[m, n] == 0.0:
                        continue
                    for k in range(W.shape[0]):
                        coef = A_dot[m, n] * W[k, j]
                        if coef == 0.0:
                            continue
                        if l == 2:
                            row[x_idx[(n, k)]] -= coef
                        else:
                            tag = bounds.partition[l - 1][n, k]
                            if tag == CROSSING:
                                row[h_idx[(l - 1, n, k)]] -= coef
                            elif tag == NONNEG:
                                row[hhat_idx[(l - 1, n, k)]] -= coef
                a_eq.append(row)
                b_eq.append(b[j])
                eq_names.append(f"phi{l}_{m}_{j}")

    # |X - Xdot| <= eps (dual gamma+/-)
    for n in range(n_outer):
        for d in range(D):
            row = np.zeros(nv)
            row[x_idx[(n, d)]] = 1.0
            row[e_idx[(n, d)]] = -1.0
            a_ub.append(row)
            b_ub.append(X[n, d])
            ub_names.append(f"gamma_plus_{n}_{d}")
            row = np.zeros(nv)
            row[x_idx[(n, d)]] = -1.0
            row[e_idx[(n, d)]] = -1.0
            a_ub.append(row)
            b_ub.append(-X[n, d])
            ub_names.append(f"gamma_minus_{n}_{d}")

    # budget rows (dual eta, rho)
    for n in range(n_outer):
        row = np.zeros(nv)
        for d in range(D):
            row[e_idx[(n, d)]] = 1.0
        a_ub.append(row)
        b_ub.append(float(budget.local_q))
        ub_names.append(f"eta_{n}")
    row = np.zeros(nv)
    for key, i in e_idx.items():
        row[i] = 1.0
    a_ub.append(row)
    b_ub.append(float(budget.global_Q))
    ub_names.append("rho")

    # convex envelope on crossing neurons (dual mu, lambda; tau is the
    # H >= 0 variable bound)
    for (l, m, j), hi_var in h_idx.items():
        R = grad.val(bounds.lower[l])[m, j]
        S = grad.val(bounds.upper[l])[m, j]
        row = np.zeros(nv)
        row[hhat_idx[(l, m, j)]] = 1.0
        row[hi_var] = -1.0
        a_ub.append(row)
        b_ub.append(0.0)
        ub_names.append(f"mu_{l}_{m}_{j}")
        row = np.zeros(nv)
        row[hi_var] = S - R
        row[hhat_idx[(l, m, j)]] = -S
        a_ub.append(row)
        b_ub.append(-S * R)
        ub_names.append(f"lambda_{l}_{m}_{j}")

    objective = np.zeros(nv)
    for k in range(K):
        objective[hhat_idx[(L, 0, k)]] = c[k]

    return LpModel(
        var_names=names,
        objective=objective,
        a_eq=np.array(a_eq).reshape(-1, nv),
        b_eq=np.array(b_eq, dtype=np.float64),
        a_ub=np.array(a_ub).reshape(-1, nv),
        b_ub=np.array(b_ub, dtype=np.float64),
        lo=np.array(lo, dtype=np.float64),
        hi=np.array(hi, dtype=np.float64),
        eq_names=eq_names,
        ub_names=ub_names,
    )


# ---------------------------------------------------------------------------
# dense two-phase simplex


def _pivot(T, cost, basis, r, col):
    T[r] /= T[r, col]
    for i in range(T.shape[0]):
        if i != r and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[r]
    if cost[col] != 0.0:
        cost -= cost[col] * T[r]
    basis[r] = col


def _simplex(T, cost, basis, tol=1e-9, max_iter=20000):
    """Bland's-rule simplex on an equality tableau; cost row updated in place."""
    m = T.shape[0]
    for i in range(m):
        j = basis[i]
        if abs(cost[j]) > 0.0:
            cost -= cost[j] * T[i]
    for _ in range(max_iter):
        enter = -1
        for j in range(T.shape[1] - 1):
            if cost[j] < -tol:
                enter = j
                break
        if enter < 0:
            return
        ratio, leave = np.inf, -1
        for i in range(m):
            if T[i, enter] > tol:
                r = T[i, -1] / T[i, enter]
                if r < ratio - tol or (abs(r - ratio) <= tol and (leave < 0 or basis[i] < basis[leave])):
                    ratio, leave = r, i
        if leave < 0:
            raise SimplexError("unbounded linear program")
        _pivot(T, cost, basis, leave, enter)
    raise SimplexError("simplex iteration limit reached")


def solve_lp(model: LpModel, tol: float = 1e-8):
    """Optimal value and primal point of an LpModel.

    Two-phase dense simplex with Bland's anti-cycling rule.  On numerical
    failure the solve is retried once with a slightly perturbed objective
    to break degeneracy; the returned value is re-evaluated with the
    original objective at the recovered vertex.
    """
    try:
        return _solve_lp_once(model, model.objective, tol)
    except SimplexError:
        rng = np.random.default_rng(0)
        jitter = model.objective + rng.normal(scale=1e-9, size=model.num_vars)
        value, x = _solve_lp_once(model, jitter, tol)
        return float(model.objective @ x), x


def _solve_lp_once(model: LpModel, objective, tol):
    nv = model.num_vars
    lo, hi = model.lo.copy(), model.hi.copy()

    # substitute each variable by one or two nonnegative columns
    cols, col_sign, col_shift, extra_ub = [], [], [], []
    for i in range(nv):
        if np.isfinite(lo[i]):
            cols.append((i, 1.0, lo[i]))
            if np.isfinite(hi[i]):
                extra_ub.append((len(cols) - 1, hi[i] - lo[i]))
        elif np.isfinite(hi[i]):
            cols.append((i, -1.0, hi[i]))
        else:
            cols.append((i, 1.0, 0.0))
            cols.append((i, -1.0, 0.0))

    nz = len(cols)
    sub = np.zeros((nv, nz))
    shift = np.zeros(nv)
    for zj, (i, sign, off) in enumerate(cols):
        sub[i, zj] = sign
        if off != 0.0:
            shift[i] = off  # at most one shifted column per variable

    A_parts, b_parts, slack_count = [], [], 0
    rows = []
    if model.a_eq.size:
        rows.append((model.a_eq, model.b_eq, False))
    if model.a_ub.size:
        rows.append((model.a_ub, model.b_ub, True))

    A_rows, b_rows, is_slack_row = [], [], []
    for A, b, slacked in rows:
        for r in range(A.shape[0]):
            A_rows.append(A[r] @ sub)
            b_rows.append(b[r] - A[r] @ shift)
            is_slack_row.append(slacked)
    for zj, ub in extra_ub:
        row = np.zeros(nz)
        row[zj] = 1.0
        A_rows.append(row)
        b_rows.append(ub)
        is_slack_row.append(True)

    n_slack = sum(is_slack_row)
    m = len(A_rows)
    A_full = np.zeros((m, nz + n_slack))
    b_full = np.array(b_rows, dtype=np.float64)
    si = 0
    for r in range(m):
        A_full[r, :nz] = A_rows[r]
        if is_slack_row[r]:
            A_full[r, nz + si] = 1.0
            si += 1
    neg = b_full < 0
    A_full[neg] *= -1.0
    b_full[neg] *= -1.0

    n_total = nz + n_slack
    # phase 1
    A1 = np.hstack([A_full, np.eye(m)])
    T = np.hstack([A1, b_full[:, None]])
    basis = list(range(n_total, n_total + m))
    cost1 = np.zeros(n_total + m + 1)
    cost1[n_total:-1] = 1.0
    _simplex(T, cost1, basis)
    if -cost1[-1] > 1e-7:
        raise SimplexError("infeasible linear program")
    # drive artificials out of the basis
    keep_rows = []
    for i in range(m):
        if basis[i] >= n_total:
            piv = -1
            for j in range(n_total):
                if abs(T[i, j]) > 1e-9:
                    piv = j
                    break
            if piv < 0:
                continue  # redundant row
            _pivot(T, cost1, basis, i, piv)
        keep_rows.append(i)
    T = T[keep_rows][:, list(range(n_total)) + [-1]]
    basis = [basis[i] for i in keep_rows]

    # phase 2
    c_orig = np.asarray(objective, dtype=np.float64)
    cz = np.zeros(n_total + 1)
    cz[:nz] = c_orig @ sub
    const = float(c_orig @ shift)
    _simplex(T, cz, basis)

    z = np.zeros(n_total)
    for i, j in enumerate(basis):
        z[j] = T[i, -1]
    x = sub @ z[:nz] + shift
    value = float(c_orig @ x)
    return value, x


def write_lp_text(model: LpModel, path):
    """Dump the model in CPLEX LP text format for external cross-checking."""
    lines = ["Minimize", " obj: " + _lin_expr(model.objective, model.var_names), "Subject To"]
    for name, row, rhs in zip(model.eq_names, model.a_eq, model.b_eq):
        lines.append(f" {name}: {_lin_expr(row, model.var_names)} = {rhs!r}")
    for name, row, rhs in zip(model.ub_names, model.a_ub, model.b_ub):
        lines.append(f" {name}: {_lin_expr(row, model.var_names)} <= {rhs!r}")
    lines.append("Bounds")
    for i, name in enumerate(model.var_names):
        lno = "-inf" if not np.isfinite(model.lo[i]) else repr(model.lo[i])
        hno = "+inf" if not np.isfinite(model.hi[i]) else repr(model.hi[i])
        lines.append(f" {lno} <= {name} <= {hno}")
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _lin_expr(row, names):
    terms = [f"{'+' if v >= 0 else '-'} {abs(v)!r} {n}" for v, n in zip(row, names) if v != 0.0]
    return " ".join(terms) if terms else "0 " + names[0]


# ---------------------------------------------------------------------------
# structural checks


def check_integrality(sp, params, bounds, budget, c, tol=1e-6):
    """LP optimum equals the binary-attribute inner-LP minimum.

    Returns (ok, relaxed_optimum, binary_minimum).
    """
    model = build_primal_lp(sp, params, bounds, budget, c)
    relaxed, _ = solve_lp(model)
    X = sp.sliced_attrs
    n, D = X.shape
    best = np.inf
    for flips in iter_admissible(n, D, budget):
        Xt = X.copy()
        for r, d in flips:
            Xt[r, d] = 1.0 - Xt[r, d]
        inner = LpModel(
            var_names=model.var_names,
            objective=model.objective,
            a_eq=model.a_eq,
            b_eq=model.b_eq,
            a_ub=model.a_ub,
            b_ub=model.b_ub,
            lo=model.lo.copy(),
            hi=model.hi.copy(),
            eq_names=model.eq_names,
            ub_names=model.ub_names,
        )
        for nn in range(n):
            for d in range(D):
                i = model.index(f"X_{nn}_{d}")
                inner.lo[i] = inner.hi[i] = Xt[nn, d]
        value, _ = solve_lp(inner)
        best = min(best, value)
    return abs(relaxed - best) <= tol, relaxed, best


def check_eta_rho_optimality(delta, budget: Budget, tol=1e-9):
    """Closed-form (eta, rho) attains the alpha-LP optimum (KKT check).

    Returns (ok, lp_optimum, greedy_value, h_value).
    """
    from .dual_cert import closed_form_eta_rho

    delta = np.asarray(delta, dtype=np.float64)
    if (delta < 0).any():
        raise ValueError("delta must be nonnegative")
    n, D = delta.shape
    q = budget.effective_q(D)
    Q = budget.effective_Q(n, D)

    nv = n * D
    names = [f"alpha_{i}_{d}" for i in range(n) for d in range(D)]
    a_ub, b_ub, ub_names = [], [], []
    for i in range(n):
        row = np.zeros(nv)
        row[i * D:(i + 1) * D] = 1.0
        a_ub.append(row)
        b_ub.append(float(q))
        ub_names.append(f"row_{i}")
    a_ub.append(np.ones(nv))
    b_ub.append(float(Q))
    ub_names.append("total")
    model = LpModel(
        var_names=names,
        objective=-delta.ravel(),
        a_eq=np.zeros((0, nv)),
        b_eq=np.zeros(0),
        a_ub=np.array(a_ub),
        b_ub=np.array(b_ub),
        lo=np.zeros(nv),
        hi=np.ones(nv),
        ub_names=ub_names,
    )
    neg_opt, _ = solve_lp(model)
    lp_opt = -neg_opt

    eta, rho, s_q, _ = closed_form_eta_rho(delta, budget)
    greedy = float(sum(delta[i, d] for i, d in s_q))
    if q == 0 or Q == 0:
        # empty budget: the box-penalty term vanishes (rho -> inf limit)
        h = 0.0
    else:
        h = float(np.maximum(delta - eta[:, None] - rho, 0.0).sum() + q * eta.sum() + Q * rho)
    ok = abs(greedy - lp_opt) <= tol and abs(h - lp_opt) <= tol
    return ok, lp_opt, greedy, h
