"""Polynomial paths between two points and line integrals of vector fields along them."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Var


@dataclass(frozen=True)
class PolynomialPath:
    """r_i(t) = sum_m coeffs[i, m] t^m for t in [0, 1].

    Row sums equal ``end - start`` plus ``start``: ``coeffs[:, 0] == start`` and
    ``coeffs.sum(axis=1) == end`` (the last coefficient is solved for, so both
    hold up to one rounding in the closing subtraction).
    """

    coeffs: np.ndarray
    start: np.ndarray
    end: np.ndarray

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, t) -> np.ndarray:
        """Points r(t), shape (len(t), d); endpoints are returned exactly."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        powers = t[:, None] ** np.arange(self.degree + 1)
        pts = powers @ self.coeffs.T
        pts[t == 0.0] = self.start
        pts[t == 1.0] = self.end
        return pts

    def derivative(self, t) -> np.ndarray:
        """r'(t), shape (len(t), d)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        m = np.arange(1, self.degree + 1)
        powers = m * t[:, None] ** (m - 1)
        return powers @ self.coeffs[:, 1:].T

    def reversed(self) -> "PolynomialPath":
        """Same curve traversed from ``end`` to ``start`` (s = 1 - t)."""
        tau = self.degree
        # coefficients of r(1 - s) via binomial expansion
        new = np.zeros_like(self.coeffs)
        for m in range(tau + 1):
            for k in range(m + 1):
                new[:, k] += self.coeffs[:, m] * comb(m, k) * (-1) ** k
        new[:, 0] = self.end
        return PolynomialPath(new, self.end.copy(), self.start.copy())


@dataclass(frozen=True)
class QuadratureSpec:
    steps: int = 512
    rule: str = "trapezoid"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("quadrature needs at least one step")
        if self.rule not in ("trapezoid", "midpoint"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes on [0, 1] and their weights."""
        K = self.steps
        if self.rule == "trapezoid":
            t = np.linspace(0.0, 1.0, K + 1)
            w = np.full(K + 1, 1.0 / K)
            w[0] = w[-1] = 0.5 / K
        else:
            t = (np.arange(K) + 0.5) / K
            w = np.full(K, 1.0 / K)
        return t, w


def _check_endpoints(start, end):
    start = np.asarray(start, dtype=np.float64).reshape(-1)
    end = np.asarray(end, dtype=np.float64).reshape(-1)
    if start.shape != end.shape:
        raise ValueError(f"endpoint dimensions differ: {start.shape} vs {end.shape}")
    return start, end


def linear_path(start, end) -> PolynomialPath:
    start, end = _check_endpoints(start, end)
    return PolynomialPath(np.stack([start, end - start], axis=1), start, end)


def sample_path(start, end, degree: int, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> PolynomialPath:
    """Random degree-``degree`` polynomial path with pinned endpoints.

    Coefficients 1..degree-1 are i.i.d. uniform on [low, high]; the top
    coefficient closes the path at ``end``. Degree 1 is the straight line and
    consumes no randomness.
    """
    if degree < 1:
        raise ValueError("path degree must be >= 1")
    start, end = _check_endpoints(start, end)
    if degree == 1:
        return linear_path(start, end)
    inner = rng.uniform(low, high, size=(start.size, degree - 1))
    top = end - start - inner.sum(axis=1)
    return PolynomialPath(np.column_stack([start, inner, top]), start, end)


def sample_paths(starts, ends, degree: int, count: int, rng: np.random.Generator, low=-1.0, high=1.0) -> np.ndarray:
    """Coefficient tensor for ``count`` random paths per endpoint pair.

    Returns shape (P, count, d, degree + 1); equivalent to calling
    :func:`sample_path` in pair-major order but drawn in one call.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    P, d = starts.shape
    if degree < 1:
        raise ValueError("path degree must be >= 1")
    if degree == 1:
        c = np.stack([starts, ends - starts], axis=-1)
        return np.broadcast_to(c[:, None], (P, count, d, 2)).copy()
    inner = rng.uniform(low, high, size=(P, count, d, degree - 1))
    top = (ends - starts)[:, None, :] - inner.sum(axis=-1)
    base = np.broadcast_to(starts[:, None, :, None], (P, count, d, 1))
    return np.concatenate([base, inner, top[..., None]], axis=-1)


def linear_coeffs(starts, ends, degree: int = 1) -> np.ndarray:
    """Straight-line coefficients (P, d, degree + 1), zero-padded above degree 1."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    c = np.zeros(starts.shape + (max(degree, 1) + 1,))
    c[..., 0] = starts
    c[..., 1] = ends - starts
    return c


def path_nodes(coeffs: np.ndarray, quad: QuadratureSpec):
    """Quadrature points and weighted tangents for a stack of paths.

    ``coeffs`` has shape (..., d, tau + 1). Returns points of shape
    (..., K', d) and tangents r'(t) * w of the same shape, so that a line
    integral is ``sum(field(points) * tangents)`` over the last two axes.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    tau = coeffs.shape[-1] - 1
    t, w = quad.nodes()
    powers = t[:, None] ** np.arange(tau + 1)
    m = np.arange(1, tau + 1)
    dpowers = m * t[:, None] ** (m - 1)
    points = np.swapaxes(coeffs @ powers.T, -1, -2)
    tangents = np.swapaxes(coeffs[..., 1:] @ (dpowers * w[:, None]).T, -1, -2)
    return np.ascontiguousarray(points), np.ascontiguousarray(tangents)


def integrate_coeffs(field: Callable, coeffs: np.ndarray, quad: QuadratureSpec, tape: Tape | None = None, chunk: int = 1 << 16):
    """Line integrals of ``field`` along each path in ``coeffs`` (shape (..., d, tau+1)).

    ``field`` maps an (N, d) batch to (N, d). Without a tape the work is
    chunked to bound memory and a numpy array of shape ``coeffs.shape[:-2]``
    is returned. With a tape the quadrature points enter as constants, the
    field is called once on a Var and the result is a Var.
    """
    points, tangents = path_nodes(coeffs, quad)
    lead = points.shape[:-2]
    Kn, d = points.shape[-2:]
    flat_pts = points.reshape(-1, d)
    flat_tan = tangents.reshape(-1, d)
    n_paths = int(np.prod(lead)) if lead else 1
    if tape is not None:
        F = field(tape.const(flat_pts))
        if F.shape != flat_pts.shape:
            raise ValueError(f"field returned shape {F.shape}, expected {flat_pts.shape}")
        per_node = (F * flat_tan).sum(axis=1)
        return per_node.reshape(n_paths, Kn).sum(axis=1).reshape(lead)
    out = np.empty(flat_pts.shape[0])
    for lo in range(0, flat_pts.shape[0], chunk):
        F = np.asarray(field(flat_pts[lo:lo + chunk]), dtype=np.float64)
        if F.shape != flat_pts[lo:lo + chunk].shape:
            raise ValueError(f"field returned shape {F.shape}, expected {flat_pts[lo:lo + chunk].shape}")
        out[lo:lo + chunk] = np.einsum("nd,nd->n", F, flat_tan[lo:lo + chunk])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite field value along path")
    return out.reshape(n_paths, Kn).sum(axis=1).reshape(lead)


def path_integral(field: Callable, path: PolynomialPath, quad: QuadratureSpec = QuadratureSpec(), tape: Tape | None = None):
    """∫_0^1 field(r(t)) · r'(t) dt by composite quadrature.

    Returns a float for array-valued fields, or a scalar Var when the field
    is evaluated on a tape.
    """
    out = integrate_coeffs(field, path.coeffs[None], quad, tape=tape)
    if isinstance(out, Var):
        return out.reshape(())
    return float(out[0])


def integrate_paths(field: Callable, paths: Sequence[PolynomialPath], quad: QuadratureSpec = QuadratureSpec(), tape: Tape | None = None):
    """Integrals along several paths (degrees may differ) with one field call."""
    tau = max(p.degree for p in paths)
    coeffs = np.zeros((len(paths), paths[0].dim, tau + 1))
    for k, p in enumerate(paths):
        coeffs[k, :, : p.degree + 1] = p.coeffs
    return integrate_coeffs(field, coeffs, quad, tape=tape)
