import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from sobbo.autodiff import Tape, grad
from sobbo.paths import (
    PolynomialPath,
    QuadratureSpec,
    integrate_coeffs,
    integrate_paths,
    linear_coeffs,
    linear_path,
    path_integral,
    sample_path,
    sample_paths,
)


def rotation(Z):
    return np.stack([-Z[:, 1], Z[:, 0]], axis=1)


def unit_hessian(r, d):
    """Symmetric matrix with eigenvalues in [-1, 1]."""
    Q, _ = np.linalg.qr(r.normal(size=(d, d)))
    return Q @ np.diag(r.uniform(-1, 1, d)) @ Q.T


def quadratic_potential(A, b):
    return (lambda z: 0.5 * z @ A @ z + b @ z), (lambda Z: Z @ A + b)


def test_endpoints_exact(rng):
    start, end = rng.normal(size=4), rng.normal(size=4)
    p = sample_path(start, end, 10, rng)
    pts = p(np.array([0.0, 1.0]))
    np.testing.assert_array_equal(pts[0], start)
    np.testing.assert_array_equal(pts[1], end)
    np.testing.assert_allclose(p.coeffs.sum(axis=1), end, atol=1e-12)


def test_degree_one_is_the_straight_line_and_uses_no_randomness():
    r = np.random.default_rng(0)
    state = r.bit_generator.state
    p = sample_path(np.zeros(2), np.ones(2), 1, r)
    assert r.bit_generator.state == state
    np.testing.assert_array_equal(p.coeffs, linear_path(np.zeros(2), np.ones(2)).coeffs)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        linear_path(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        sample_path(np.zeros(2), np.zeros(2), 0, np.random.default_rng(0))


def test_derivative_against_differences(rng):
    p = sample_path(rng.normal(size=3), rng.normal(size=3), 6, rng)
    t = np.linspace(0.1, 0.9, 5)
    h = 1e-6
    np.testing.assert_allclose(p.derivative(t), (p(t + h) - p(t - h)) / (2 * h), rtol=1e-6, atol=1e-8)


def test_reversed_traverses_backwards(rng):
    p = sample_path(rng.normal(size=3), rng.normal(size=3), 10, rng)
    q = p.reversed()
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(q(t), p(1 - t), atol=1e-10)


def test_sample_paths_matches_single_draws():
    starts = np.array([[0.0, 0.0], [1.0, 2.0]])
    ends = np.array([[1.0, 1.0], [0.0, -1.0]])
    batch = sample_paths(starts, ends, 5, 3, np.random.default_rng(7))
    assert batch.shape == (2, 3, 2, 6)
    r = np.random.default_rng(7)
    inner = r.uniform(-1, 1, size=(2, 3, 2, 4))
    np.testing.assert_array_equal(batch[..., 1:5], inner)
    np.testing.assert_allclose(batch.sum(axis=-1), np.broadcast_to(ends[:, None], (2, 3, 2)), atol=1e-12)


@pytest.mark.parametrize("rule", ["trapezoid", "midpoint"])
def test_constant_field_on_straight_line_is_exact(rule):
    c = np.array([2.0, -1.0, 0.5])
    field = lambda Z: np.broadcast_to(c, Z.shape)
    val = path_integral(field, linear_path(np.zeros(3), np.array([1.0, 2.0, 3.0])), QuadratureSpec(1, rule))
    assert val == pytest.approx(c @ np.array([1.0, 2.0, 3.0]), abs=1e-14)


def test_gradient_field_integral_equals_potential_difference(rng):
    A = unit_hessian(rng, 4)
    b = rng.normal(size=4)
    f, grad_f = quadratic_potential(A, b)
    for _ in range(20):
        s, e = rng.uniform(size=4), rng.uniform(size=4)
        val = path_integral(grad_f, sample_path(s, e, 10, rng), QuadratureSpec(512))
        assert abs(val - (f(e) - f(s))) <= 1e-3


def test_integral_matches_adaptive_quadrature_oracle(rng):
    # non-conservative field, so the integral depends on the path
    field = lambda Z: np.stack([np.sin(Z[:, 1]), Z[:, 0] ** 2], axis=1)
    p = sample_path(np.zeros(2), np.ones(2), 4, rng)

    def integrand(t):
        r = p(np.array([t]))
        return float(field(r)[0] @ p.derivative(np.array([t]))[0])

    oracle, _ = quad(integrand, 0.0, 1.0, epsabs=1e-12)
    assert path_integral(field, p, QuadratureSpec(2048)) == pytest.approx(oracle, abs=1e-5)


def test_trapezoid_error_shrinks_quadratically(rng):
    field = lambda Z: np.stack([np.sin(3 * Z[:, 1]), np.cos(2 * Z[:, 0])], axis=1)
    p = sample_path(np.zeros(2), np.ones(2), 5, rng)
    ref = path_integral(field, p, QuadratureSpec(1 << 14))
    e1 = abs(path_integral(field, p, QuadratureSpec(32)) - ref)
    e2 = abs(path_integral(field, p, QuadratureSpec(64)) - ref)
    assert 3.0 < e1 / e2 < 5.0


def test_closed_loop_circulation_of_rotation():
    # r(t) = (t - t^2, t^2 - t^3) encloses a nonzero area; oracle is adaptive quadrature of x dy - y dx
    coeffs = np.array([[0.0, 1.0, -1.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
    p = PolynomialPath(coeffs, np.zeros(2), np.zeros(2))
    val = path_integral(rotation, p, QuadratureSpec(4096))

    def integrand(t):
        x, y = p(np.array([t]))[0]
        dx, dy = p.derivative(np.array([t]))[0]
        return x * dy - y * dx

    oracle, _ = quad(integrand, 0, 1)
    assert abs(oracle) > 1e-3
    assert val == pytest.approx(oracle, abs=1e-6)


def test_reversing_the_path_negates_the_integral(rng):
    field = lambda Z: np.stack([Z[:, 0] * Z[:, 1], np.exp(Z[:, 0])], axis=1)
    p = sample_path(rng.normal(size=2), rng.normal(size=2), 10, rng)
    q = QuadratureSpec(512)
    assert path_integral(field, p.reversed(), q) == pytest.approx(-path_integral(field, p, q), abs=1e-10)


def test_integrate_paths_mixed_degrees(rng):
    field = lambda Z: Z
    paths = [linear_path(np.zeros(2), np.ones(2)), sample_path(np.zeros(2), np.ones(2), 7, rng)]
    vals = integrate_paths(field, paths, QuadratureSpec(256))
    np.testing.assert_allclose(vals, [1.0, 1.0], atol=1e-3)


def test_taped_integral_matches_numpy_and_differentiates(rng):
    W = rng.normal(size=(3, 3))
    coeffs = sample_paths(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), 3, 2, rng)
    q = QuadratureSpec(64)
    plain = integrate_coeffs(lambda Z: Z @ W, coeffs, q)
    tape = Tape()
    Wv = tape.leaf(W)
    taped = integrate_coeffs(lambda Z: Z @ Wv, coeffs, q, tape=tape)
    np.testing.assert_allclose(taped.value, plain, rtol=1e-13)
    (gW,) = grad(taped.sum(), [Wv])
    h = 1e-6
    E = np.zeros_like(W)
    E[1, 2] = h
    fd = (integrate_coeffs(lambda Z: Z @ (W + E), coeffs, q).sum() - integrate_coeffs(lambda Z: Z @ (W - E), coeffs, q).sum()) / (2 * h)
    assert gW[1, 2] == pytest.approx(fd, rel=1e-6)


def test_chunking_does_not_change_the_result(rng):
    field = lambda Z: np.sin(Z)
    coeffs = sample_paths(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), 4, 3, rng)
    q = QuadratureSpec(100)
    np.testing.assert_allclose(integrate_coeffs(field, coeffs, q, chunk=7), integrate_coeffs(field, coeffs, q), rtol=1e-13)


def test_non_finite_field_raises():
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            path_integral(lambda Z: Z / 0.0, linear_path(np.zeros(2), np.ones(2)), QuadratureSpec(4))


def test_linear_coeffs_padding():
    c = linear_coeffs(np.zeros((2, 3)), np.ones((2, 3)), degree=4)
    assert c.shape == (2, 3, 5)
    np.testing.assert_array_equal(c[..., 2:], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_path_independence_of_gradient_fields(seed, degree):
    r = np.random.default_rng(seed)
    A = unit_hessian(r, 3)
    b = r.normal(size=3)
    f, grad_f = quadratic_potential(A, b)
    s, e = r.uniform(size=3), r.uniform(size=3)
    val = path_integral(grad_f, sample_path(s, e, degree, r), QuadratureSpec(512))
    assert abs(val - (f(e) - f(s))) <= 1e-3


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(0)
    with pytest.raises(ValueError):
        QuadratureSpec(8, "simpson")
    t, w = QuadratureSpec(4).nodes()
    assert w.sum() == pytest.approx(1.0)


def test_rotation_field_is_path_dependent():
    # straight line (1,0)->(0,1) versus a degree-3 path, each checked against a fine-grid oracle
    line = linear_path(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    curve = PolynomialPath(np.array([[1.0, -1.0, 0.5, -0.5], [0.0, 0.0, 2.0, -1.0]]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    fine = QuadratureSpec(100_000)
    a = path_integral(rotation, line, QuadratureSpec(512))
    b = path_integral(rotation, curve, QuadratureSpec(512))
    assert a == pytest.approx(path_integral(rotation, line, fine), abs=1e-6)
    assert b == pytest.approx(path_integral(rotation, curve, fine), abs=1e-5)
    assert abs(a - b) > 1e-2


def test_identity_field_any_path_gives_half_dimension(rng):
    d = 5
    for _ in range(10):
        p = sample_path(np.zeros(d), np.ones(d), 10, rng)
        assert path_integral(lambda Z: Z, p, QuadratureSpec(512)) == pytest.approx(d / 2, abs=1e-3)


def test_error_non_increasing_under_refinement(rng):
    A = unit_hessian(rng, 3)
    b = rng.normal(size=3)
    f, grad_f = quadratic_potential(A, b)
    s, e = rng.uniform(size=3), rng.uniform(size=3)
    p = sample_path(s, e, 10, rng)
    errs = [abs(path_integral(grad_f, p, QuadratureSpec(K)) - (f(e) - f(s))) for K in (8, 64, 512)]
    assert errs[0] >= errs[1] >= errs[2]
