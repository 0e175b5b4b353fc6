import numpy as np
import pytest

from gcn_cert import grad
from gcn_cert.gcn import GcnParams
from gcn_cert.grad import Tape, Var, backward, finite_difference_check, gradient


def _scalar_fd(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        g.flat[i] = (fn(hi) - fn(lo)) / (2.0 * eps)
    return g


def test_primitives_match_numpy_on_plain_arrays(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    np.testing.assert_array_equal(grad.matmul(a, b), a @ b)
    np.testing.assert_array_equal(grad.transpose(a), a.T)
    np.testing.assert_array_equal(grad.relu(a), np.maximum(a, 0.0))
    np.testing.assert_array_equal(grad.pos(a), np.maximum(a, 0.0))
    np.testing.assert_array_equal(grad.negpart(a), np.maximum(-a, 0.0))
    np.testing.assert_array_equal(grad.asum(a, axis=1), a.sum(axis=1))
    np.testing.assert_array_equal(grad.total(a), a.sum())
    np.testing.assert_array_equal(grad.gather(a, [0, 5]), a.ravel()[[0, 5]])
    np.testing.assert_array_equal(grad.expand_dims(a, 0), a[None])
    np.testing.assert_allclose(grad.exp(a), np.exp(a))


def test_identity_pos_minus_negpart(rng):
    a = rng.normal(size=(5, 5))
    np.testing.assert_allclose(grad.pos(a) - grad.negpart(a), a)


def test_composite_gradient_matches_finite_differences(rng):
    W = rng.normal(size=(3, 3))
    A = rng.normal(size=(2, 3))
    c = rng.normal(size=3)

    def fn(w):
        return float(np.maximum(A @ w, 0.0).sum() + np.exp(0.1 * w).sum() + (w @ c) @ c)

    v = Var(W)
    loss = grad.total(grad.relu(grad.matmul(A, v))) + grad.total(grad.exp(0.1 * v)) + grad.total(
        grad.matmul(grad.matmul(v, c.reshape(3, 1)).T, c.reshape(3, 1))
    )
    backward(loss)
    np.testing.assert_allclose(v.grad, _scalar_fd(fn, W), atol=1e-6)


def test_relu_subgradient_zero_at_kink():
    v = Var(np.array([0.0, -1.0, 2.0]))
    loss = grad.total(grad.relu(v))
    backward(loss)
    np.testing.assert_array_equal(v.grad, [0.0, 0.0, 1.0])


def test_log_softmax_entry_gradient(rng):
    z = rng.normal(size=4)

    def fn(x):
        s = x - x.max()
        return float(s[2] - np.log(np.exp(s).sum()))

    v = Var(z)
    backward(grad.log_softmax_entry(v, 2))
    np.testing.assert_allclose(v.grad, _scalar_fd(fn, z), atol=1e-6)


def test_gather_accumulates_duplicate_indices():
    v = Var(np.arange(4.0))
    loss = grad.total(grad.gather(v, [1, 1, 3]))
    backward(loss)
    np.testing.assert_array_equal(v.grad, [0.0, 2.0, 0.0, 1.0])


def test_broadcasting_gradients(rng):
    a = rng.normal(size=(3, 1))
    b = rng.normal(size=(1, 4))
    va, vb = Var(a), Var(b)
    backward(grad.total(va * vb))
    np.testing.assert_allclose(va.grad, np.broadcast_to(b, (3, 4)).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(vb.grad, np.broadcast_to(a, (3, 4)).sum(axis=0, keepdims=True))


def test_tape_replay_is_bit_identical(rng):
    A = rng.normal(size=(3, 3))
    with Tape() as tape:
        v = Var(A)
        out = grad.total(grad.relu(grad.matmul(v, v.T)) + grad.exp(0.01 * v))
    assert len(tape.nodes) > 0
    assert tape.replay()


def test_backward_errors():
    with pytest.raises(TypeError):
        backward(np.float64(3.0))
    with pytest.raises(ValueError, match="scalar"):
        backward(Var(np.zeros(3)))
    with pytest.raises(FloatingPointError):
        backward(Var(np.nan) * 1.0)


def test_gradient_of_parameter_free_loss_is_zero():
    params = GcnParams([np.ones((2, 2))], [np.zeros(2)])
    value, grads = gradient(lambda shadow: np.float64(7.0), params)
    assert value == 7.0
    assert np.all(grads.weights[0] == 0.0)
    assert np.all(grads.biases[0] == 0.0)


def test_gradient_returns_params_structure(rng):
    params = GcnParams([rng.normal(size=(2, 3)), rng.normal(size=(3, 2))], [rng.normal(size=3), rng.normal(size=2)])

    def closure(shadow):
        loss = 0.0
        for w in shadow.weights:
            loss = loss + grad.total(w * w)
        for b in shadow.biases:
            loss = loss + grad.total(grad.relu(b))
        return loss

    value, grads = gradient(closure, params)
    for w, gw in zip(params.weights, grads.weights):
        np.testing.assert_allclose(gw, 2.0 * w)
    for b, gb in zip(params.biases, grads.biases):
        np.testing.assert_allclose(gb, (b > 0).astype(float))


def test_finite_difference_check_on_smooth_loss(rng):
    params = GcnParams([rng.normal(size=(3, 3))], [rng.normal(size=3)])

    def closure(shadow):
        return grad.total(grad.exp(0.1 * shadow.weights[0])) + grad.total(shadow.biases[0] * shadow.biases[0])

    assert finite_difference_check(closure, params, rng=rng, num_coords=8) < 1e-7


def test_linear_chain_gradient_closed_form(rng):
    # c^T (A2 relu(A1 X W1 + b1) W2 + b2) with all pre-activations positive:
    # the W1 gradient is the exact linear-chain product
    A1 = np.abs(rng.normal(size=(2, 3)))
    A2 = np.abs(rng.normal(size=(1, 2)))
    X = np.abs(rng.normal(size=(3, 4)))
    W1 = np.abs(rng.normal(size=(4, 3))) + 0.1
    W2 = rng.normal(size=(3, 2))
    c = rng.normal(size=2)
    params = GcnParams([W1, W2], [np.zeros(3), np.zeros(2)])

    def closure(shadow):
        H = grad.relu(grad.matmul(grad.matmul(A1, X), shadow.weights[0]) + shadow.biases[0])
        out = grad.matmul(grad.matmul(A2, H), shadow.weights[1]) + shadow.biases[1]
        return grad.total(out * c)

    _, grads = gradient(closure, params)
    expected = (A1 @ X).T @ (A2.T @ (c[None, :] @ W2.T))
    np.testing.assert_allclose(grads.weights[0], expected, atol=1e-10)
