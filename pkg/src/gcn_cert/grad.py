"""Minimal reverse-mode gradient engine.

Every differentiable quantity in this package (exact forward pass,
activation bounds, dual objective) is built from a small set of array
primitives.  Each primitive works on plain numpy arrays and on :class:`Var`
nodes; mixing the two is allowed.  Gradients follow a frozen-selection
subgradient convention: all case-split masks ([.]_+/[.]_- signs, ReLU
masks, top-k selections) are fixed at their forward values, so the
backward pass is the gradient of a piecewise-linear function evaluated on
its active piece.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "val",
    "is_var",
    "matmul",
    "transpose",
    "relu",
    "pos",
    "negpart",
    "asum",
    "total",
    "gather",
    "expand_dims",
    "exp",
    "log",
    "log_softmax_entry",
    "backward",
    "gradient",
    "finite_difference_check",
]


_ACTIVE_TAPE = None


class Tape:
    """Records primitive nodes in creation order.

    Used only for auditing determinism: :meth:`replay` recomputes every
    recorded node from its saved parents and checks bit-identity with the
    stored forward values.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def replay(self):
        """Recompute all recorded nodes; True iff bit-identical."""
        for node in self.nodes:
            if node._recompute is None:
                continue
            fresh = node._recompute()
            if fresh.shape != node.value.shape:
                return False
            if not np.array_equal(fresh, node.value):
                return False
        return True


class Var:
    """A node in the computation graph wrapping a float ndarray."""

    # keep numpy from consuming us in mixed expressions; reflected
    # operators on Var handle ndarray <op> Var
    __array_ufunc__ = None

    __slots__ = ("value", "grad", "_parents", "_recompute")

    def __init__(self, value, parents=(), recompute=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)  # (Var, vjp) pairs
        self._recompute = recompute
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(other, _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def is_var(x):
    return isinstance(x, Var)


def val(x):
    """Numeric value of x whether it is a Var or an array."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` undoing numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    out = av + bv
    parents = []
    if is_var(a):
        parents.append((a, lambda g, sh=av.shape: _unbroadcast(g, sh)))
    if is_var(b):
        parents.append((b, lambda g, sh=bv.shape: _unbroadcast(g, sh)))
    return Var(out, parents, recompute=lambda: val(a) + val(b))


def _neg(a):
    if not is_var(a):
        return -np.asarray(a, dtype=np.float64)
    return Var(-a.value, [(a, lambda g: -g)], recompute=lambda: -a.value)


def _mul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    out = av * bv
    parents = []
    if is_var(a):
        parents.append((a, lambda g, o=bv, sh=av.shape: _unbroadcast(g * o, sh)))
    if is_var(b):
        parents.append((b, lambda g, o=av, sh=bv.shape: _unbroadcast(g * o, sh)))
    return Var(out, parents, recompute=lambda: val(a) * val(b))


def _div(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    out = av / bv
    parents = []
    if is_var(a):
        parents.append((a, lambda g, o=bv, sh=av.shape: _unbroadcast(g / o, sh)))
    if is_var(b):
        parents.append(
            (b, lambda g, n=av, d=bv, sh=bv.shape: _unbroadcast(-g * n / (d * d), sh))
        )
    return Var(out, parents, recompute=lambda: val(a) / val(b))


def matmul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    av, bv = val(a), val(b)
    out = av @ bv
    parents = []
    if is_var(a):
        parents.append((a, lambda g, o=bv: g @ o.T))
    if is_var(b):
        parents.append((b, lambda g, o=av: o.T @ g))
    return Var(out, parents, recompute=lambda: val(a) @ val(b))


def transpose(a):
    if not is_var(a):
        return np.asarray(a, dtype=np.float64).T
    return Var(a.value.T, [(a, lambda g: g.T)], recompute=lambda: a.value.T)


def relu(a):
    """max(a, 0) with the mask frozen at the forward value."""
    if not is_var(a):
        return np.maximum(np.asarray(a, dtype=np.float64), 0.0)
    mask = (a.value > 0).astype(np.float64)
    return Var(
        a.value * mask,
        [(a, lambda g, m=mask: g * m)],
        recompute=lambda: np.maximum(a.value, 0.0),
    )


def pos(a):
    """[a]_+ = max(a, 0)."""
    return relu(a)


def negpart(a):
    """[a]_- = max(-a, 0); nonnegative by construction."""
    return relu(_neg(a))


def asum(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.asarray(a, dtype=np.float64).sum(axis=axis, keepdims=keepdims)

    def vjp(g, sh=a.value.shape, ax=axis, kd=keepdims):
        g = np.asarray(g, dtype=np.float64)
        if ax is None:
            return np.broadcast_to(g, sh).copy()
        if not kd:
            axes = ax if isinstance(ax, tuple) else (ax,)
            for x in sorted(a % len(sh) for a in axes):
                g = np.expand_dims(g, x)
        return np.broadcast_to(g, sh).copy()

    return Var(
        a.value.sum(axis=axis, keepdims=keepdims),
        [(a, vjp)],
        recompute=lambda: a.value.sum(axis=axis, keepdims=keepdims),
    )


def total(a):
    """Sum of all entries as a scalar."""
    return asum(a)


def gather(a, indices):
    """Select flat entries of a by a fixed index array; returns 1-d."""
    idx = np.asarray(indices, dtype=np.intp)
    if not is_var(a):
        return np.asarray(a, dtype=np.float64).ravel()[idx]

    def vjp(g, sh=a.value.shape, ix=idx):
        out = np.zeros(int(np.prod(sh)), dtype=np.float64)
        np.add.at(out, ix, np.asarray(g, dtype=np.float64))
        return out.reshape(sh)

    return Var(
        a.value.ravel()[idx], [(a, vjp)], recompute=lambda: a.value.ravel()[idx]
    )


def expand_dims(a, axis):
    if not is_var(a):
        return np.expand_dims(np.asarray(a, dtype=np.float64), axis)
    return Var(
        np.expand_dims(a.value, axis),
        [(a, lambda g, ax=axis: np.squeeze(np.asarray(g), axis=ax))],
        recompute=lambda: np.expand_dims(a.value, axis),
    )


def exp(a):
    if not is_var(a):
        return np.exp(np.asarray(a, dtype=np.float64))
    out = np.exp(a.value)
    return Var(out, [(a, lambda g, o=out: g * o)], recompute=lambda: np.exp(a.value))


def log(a):
    if not is_var(a):
        return np.log(np.asarray(a, dtype=np.float64))
    return Var(
        np.log(a.value),
        [(a, lambda g, o=a.value: g / o)],
        recompute=lambda: np.log(a.value),
    )


def log_softmax_entry(logits, index):
    """log softmax(logits)[index] for a 1-d logit vector, max-shifted."""
    z = val(logits)
    shift = float(z.max())
    shifted = logits - shift
    lse = log(total(exp(shifted)))
    picked = gather(shifted, [int(index)])
    return asum(picked) - lse


def backward(loss):
    """Accumulate gradients of a scalar Var into .grad of every ancestor."""
    if not is_var(loss):
        raise TypeError("backward() needs a Var")
    if loss.value.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not np.all(np.isfinite(loss.value)):
        raise FloatingPointError("non-finite loss value")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.asarray(contrib, dtype=np.float64)


def gradient(loss_closure, params):
    """Gradient of a scalar loss w.r.t. GcnParams.

    `loss_closure` receives a params object whose weights and biases are
    Var leaves and must return a scalar Var.  Returns (loss value, params
    structure of gradient arrays).
    """
    w_vars = [Var(w) for w in params.weights]
    b_vars = [Var(b) for b in params.biases]
    shadow = params.replace(weights=w_vars, biases=b_vars)
    loss = loss_closure(shadow)
    if not is_var(loss):
        # loss never touched the parameters
        zero_w = [np.zeros_like(w) for w in params.weights]
        zero_b = [np.zeros_like(b) for b in params.biases]
        return float(np.asarray(loss)), params.replace(weights=zero_w, biases=zero_b)
    if not np.all(np.isfinite(loss.value)):
        raise FloatingPointError("non-finite loss before backward")
    backward(loss)
    gw = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in w_vars]
    gb = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in b_vars]
    return float(loss.value), params.replace(weights=gw, biases=gb)


def finite_difference_check(loss_closure, params, rng=None, num_coords=10, eps=1e-6):
    """Max relative error of analytic vs central-difference derivatives.

    Samples `num_coords` parameter coordinates uniformly.  The relative
    error uses max(1, |fd|, |analytic|) as denominator so tiny matching
    derivatives do not blow it up.
    """
    rng = np.random.default_rng() if rng is None else rng
    _, grads = gradient(loss_closure, params)
    tensors = list(params.weights) + list(params.biases)
    gtensors = list(grads.weights) + list(grads.biases)
    sizes = np.array([t.size for t in tensors])
    flat_total = int(sizes.sum())
    worst = 0.0
    for _ in range(num_coords):
        flat = int(rng.integers(flat_total))
        ti = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        local = flat - int(np.cumsum(sizes)[ti - 1]) if ti > 0 else flat
        t = tensors[ti]
        orig = t.flat[local]
        t.flat[local] = orig + eps
        hi = float(val(loss_closure(params)))
        t.flat[local] = orig - eps
        lo = float(val(loss_closure(params)))
        t.flat[local] = orig
        fd = (hi - lo) / (2.0 * eps)
        an = gtensors[ti].flat[local]
        rel = abs(fd - an) / max(1.0, abs(fd), abs(an))
        worst = max(worst, rel)
    return worst
