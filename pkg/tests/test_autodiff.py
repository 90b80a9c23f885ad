import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sobbo import autodiff as ad
from sobbo.autodiff import GradRequest, NonFiniteError, ShapeError, Tape, backward, forward, grad

from conftest import central_diff


def _grad_of(fn, *arrays):
    tape = Tape()
    xs = [tape.leaf(a) for a in arrays]
    return grad(fn(*xs), xs)


def test_cube_first_and_second_derivative():
    tape = Tape()
    x = tape.leaf(2.0)
    y = x * x * x
    (dy,) = grad(y, [x], create_graph=True)
    assert float(dy.value) == 12.0
    (d2y,) = grad(dy, [x])
    assert float(d2y) == 12.0


def test_matmul_gradient_is_the_other_factor():
    a = np.array([3.0, 7.0])
    (ga,) = _grad_of(lambda v: v @ np.array([3.0, 7.0]), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(ga, a)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    z = tape.leaf(np.ones(2))
    gx, gz = grad((x * 2.0).sum(), [x, z])
    np.testing.assert_array_equal(gx, 2.0)
    np.testing.assert_array_equal(gz, 0.0)


def test_shared_subexpression_accumulates():
    # y = x*x + x*x uses the same node twice
    tape = Tape()
    x = tape.leaf(1.5)
    s = x * x
    (g,) = grad(s + s, [x])
    assert float(g) == pytest.approx(6.0)


def test_nonscalar_output_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        grad(x * 2.0, [x])


def test_shape_mismatch_raises_shape_error():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 5)))
    with pytest.raises(ShapeError):
        a @ b


def test_non_finite_forward_raises():
    tape = Tape()
    x = tape.leaf(np.array([-1.0]))
    with pytest.raises(NonFiniteError):
        ad.log(x)


def test_forward_by_node_ids():
    tape = Tape()
    a = tape.leaf(np.array([1.0, 2.0]))
    b = tape.leaf(np.array([3.0, 4.0]))
    out = forward(tape, "mul", [a.id, b.id])
    np.testing.assert_array_equal(tape.values[out], [3.0, 8.0])
    with pytest.raises(KeyError):
        forward(tape, "no_such_op", [a.id])


def test_backward_request_second_order_mixed_partial():
    # f = sin(x0) * x1^2, d/dx1 (df/dx0) = 2 x1 cos(x0)
    tape = Tape()
    x = tape.leaf(np.array([0.3, 1.7]))
    f = ad.sin(x[0]) * x[1] * x[1]
    req = GradRequest(f.id, (x.id,), order=2, inner=x.id, component=(0,))
    g = backward(tape, req)[x.id]
    assert g[1] == pytest.approx(2 * 1.7 * np.cos(0.3), rel=1e-12)
    assert g[0] == pytest.approx(-np.sin(0.3) * 1.7 ** 2, rel=1e-12)


def test_grad_request_validation():
    with pytest.raises(ValueError):
        GradRequest(0, (0,), order=3)
    with pytest.raises(ValueError):
        GradRequest(0, (0,), order=2)


UNARY = [
    ("tanh", ad.tanh, lambda a: a),
    ("exp", ad.exp, lambda a: a),
    ("sin", ad.sin, lambda a: a),
    ("cos", ad.cos, lambda a: a),
    ("log", ad.log, lambda a: np.abs(a) + 0.5),
    ("sqrt", ad.sqrt, lambda a: np.abs(a) + 0.5),
]


@pytest.mark.parametrize("name,fn,domain", UNARY, ids=[u[0] for u in UNARY])
def test_unary_first_and_second_order_against_differences(name, fn, domain, rng):
    a = domain(rng.normal(size=5))
    (g,) = _grad_of(lambda v: fn(v).sum(), a)
    np.testing.assert_allclose(g, central_diff(lambda v: fn(v).sum(), a), rtol=1e-6, atol=1e-8)

    def first(v):
        tape = Tape()
        x = tape.leaf(v)
        (gx,) = grad(fn(x).sum(), [x])
        return gx

    tape = Tape()
    x = tape.leaf(a)
    (gx,) = grad(fn(x).sum(), [x], create_graph=True)
    (h,) = grad((gx * gx).sum(), [x])
    np.testing.assert_allclose(h, central_diff(lambda v: (first(v) ** 2).sum(), a), rtol=1e-5, atol=1e-7)


BINARY = [
    ("add", lambda a, b: a + b),
    ("sub", lambda a, b: a - b),
    ("mul", lambda a, b: a * b),
    ("div", lambda a, b: a / (b * b + 1.0)),
    ("pow", lambda a, b: (a ** 3) * b),
]


@pytest.mark.parametrize("name,fn", BINARY, ids=[b[0] for b in BINARY])
@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 4), (4,)), ((3, 1), (1, 4)), ((2, 3), ())])
def test_broadcasting_binary_ops_against_differences(name, fn, shapes, rng):
    a = rng.normal(size=shapes[0])
    b = rng.normal(size=shapes[1])
    ga, gb = _grad_of(lambda x, y: (fn(x, y) * fn(x, y)).sum(), a, b)
    np.testing.assert_allclose(ga, central_diff(lambda v: (fn(v, b) ** 2).sum(), a), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(gb, central_diff(lambda v: (fn(a, v) ** 2).sum(), b), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("shapes", [((4, 3), (3, 2)), ((3,), (3, 2)), ((4, 3), (3,)), ((3,), (3,))])
def test_matmul_shapes_against_differences(shapes, rng):
    a = rng.normal(size=shapes[0])
    b = rng.normal(size=shapes[1])
    f = lambda x, y: ad.tanh(x @ y).sum()
    ga, gb = _grad_of(f, a, b)
    np.testing.assert_allclose(ga, central_diff(lambda v: np.tanh(v @ b).sum(), a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, central_diff(lambda v: np.tanh(a @ v).sum(), b), rtol=1e-6, atol=1e-8)


def test_structural_ops_against_differences(rng):
    a = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 4))

    def f(x):
        parts = ad.concat([x[:, :2], x.T[2:].reshape(4, 1)], axis=1)
        return (parts * x).sum(axis=0).mean() + (x.T * w).sum() + x.broadcast_to((2, 4, 3)).sum()

    def f_np(x):
        parts = np.concatenate([x[:, :2], x.T[2:].reshape(4, 1)], axis=1)
        return (parts * x).sum(axis=0).mean() + (x.T * w).sum() + np.broadcast_to(x, (2, 4, 3)).sum()

    (g,) = _grad_of(f, a)
    np.testing.assert_allclose(g, central_diff(f_np, a), rtol=1e-6, atol=1e-8)


def test_fancy_index_scatter_accumulates_repeats():
    tape = Tape()
    x = tape.leaf(np.arange(4.0))
    (g,) = grad(x[np.array([0, 0, 2])].sum(), [x])
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=4))
def test_gradient_of_sum_is_linear(seed, k):
    # grad(a f + b g) == a grad f + b grad g
    r = np.random.default_rng(seed)
    v = r.normal(size=k)
    a, b = r.normal(size=2)
    f = lambda x: ad.tanh(x).sum()
    g = lambda x: (ad.sin(x) * x).sum()
    (lhs,) = _grad_of(lambda x: a * f(x) + b * g(x), v)
    (gf,) = _grad_of(f, v)
    (gg,) = _grad_of(g, v)
    np.testing.assert_allclose(lhs, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_array_inputs_bypass_the_tape():
    x = np.array([0.1, 0.2])
    np.testing.assert_array_equal(ad.tanh(x), np.tanh(x))
    np.testing.assert_array_equal(ad.concat([x, x]), np.concatenate([x, x]))
