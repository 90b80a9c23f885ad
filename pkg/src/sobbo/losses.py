"""Training objectives as tape expressions.

``field`` arguments are callables mapping an (N, d) batch to (N, d): a
:class:`~sobbo.models.TapedMlp` or any function written with the array-or-Var
operators of :mod:`sobbo.autodiff`. Pair ``(k, k2)`` compares ``y[k] - y[k2]``
with the integral of the field along a path from ``Z[k2]`` to ``Z[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Tape, Var
from .models import input_jacobian
from .paths import QuadratureSpec, integrate_coeffs, linear_coeffs, sample_paths

FULL_PAIR_LIMIT = 16


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the gradient-field objective.

    ``num_paths == 0`` means reconstruction on the straight line only.
    ``balance_pairs=None`` enumerates every off-diagonal Jacobian pair.
    """

    balance_weight: float = 0.0
    num_paths: int = 0
    path_degree: int = 10
    quadrature: QuadratureSpec = dc_field(default_factory=QuadratureSpec)
    balance_pairs: int | None = None

    def __post_init__(self):
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be >= 0")
        if self.num_paths < 0:
            raise ValueError("num_paths must be >= 0")
        if self.path_degree < 1:
            raise ValueError("path_degree must be >= 1")
        if self.balance_pairs is not None and self.balance_pairs < 1:
            raise ValueError("balance_pairs must be >= 1")


def _tape(field, tape):
    if tape is not None:
        return tape
    return getattr(field, "tape", None) or Tape()


def erm_loss(model, Z, y, tape: Tape | None = None) -> Var:
    """Mean squared error of the surrogate on a batch."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty batch")
    tape = _tape(model, tape)
    pred = model(tape.const(Z)).reshape(-1)
    err = pred - y
    return (err * err).mean()


def pair_indices(B: int, rng: np.random.Generator, full_limit: int = FULL_PAIR_LIMIT) -> np.ndarray:
    """Ordered pairs (k, k2), k != k2, used inside one batch.

    All B(B-1) pairs when ``B <= full_limit``, otherwise B distinct pairs
    drawn uniformly without replacement.
    """
    if B < 2:
        raise ValueError("need at least two samples to form pairs")
    if B <= full_limit:
        k, k2 = np.nonzero(~np.eye(B, dtype=bool))
        return np.column_stack([k, k2])
    flat = rng.choice(B * (B - 1), size=B, replace=False)
    k = flat // (B - 1)
    r = flat % (B - 1)
    k2 = r + (r >= k)
    return np.column_stack([k, k2])


def balance_index_pairs(d: int, M: int | None, rng: np.random.Generator | None) -> np.ndarray:
    """Off-diagonal Jacobian index pairs: all d(d-1) of them, or M uniform draws."""
    if d < 2:
        raise ValueError("balance loss needs input dimension >= 2")
    a, b = np.nonzero(~np.eye(d, dtype=bool))
    every = np.column_stack([a, b])
    if M is None or M >= len(every):
        return every
    if rng is None:
        raise ValueError("sampling balance pairs needs an rng")
    return every[rng.integers(0, len(every), size=M)]


def balance_loss(field, Z, M: int | None = None, rng=None, pairs=None, tape: Tape | None = None) -> Var:
    """Mean squared asymmetry of the field's input Jacobian over batch points and index pairs."""
    Z = np.asarray(Z, dtype=np.float64)
    tape = _tape(field, tape)
    if pairs is None:
        pairs = balance_index_pairs(Z.shape[1], M, rng)
    pairs = np.asarray(pairs)
    if Z.shape[1] < 2:
        raise ValueError("balance loss needs input dimension >= 2")
    J = input_jacobian(field, tape.leaf(Z))
    a, b = pairs[:, 0], pairs[:, 1]
    diff = J[:, a, b] - J[:, b, a]
    return (diff * diff).mean()


def _split(Z, y, pairs):
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("empty pair set")
    k, k2 = pairs[:, 0], pairs[:, 1]
    return Z[k2], Z[k], y[k] - y[k2]


def reconstruction_loss(field, Z, y, pairs, quad: QuadratureSpec = QuadratureSpec(), tape: Tape | None = None) -> Var:
    """Mean over pairs of (y_k - y_k2 - straight-line integral of the field)^2."""
    starts, ends, dy = _split(Z, y, pairs)
    tape = _tape(field, tape)
    integral = integrate_coeffs(field, linear_coeffs(starts, ends), quad, tape=tape)
    res = dy - integral
    return (res * res).mean()


def path_independence_loss(
    field,
    Z,
    y,
    pairs,
    num_paths: int,
    degree: int,
    quad: QuadratureSpec,
    rng: np.random.Generator,
    include_linear: bool = True,
    tape: Tape | None = None,
) -> Var:
    """Mean over pairs of the worst squared residual among sampled paths.

    Candidates per pair are the straight line (index 0, when
    ``include_linear``) followed by ``num_paths`` random polynomial paths.
    The max is found on plain arrays; only the winning path is recorded on
    the tape, so gradients flow through the argmax alone (ties go to the
    lowest index).
    """
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1; use reconstruction_loss for the straight line only")
    starts, ends, dy = _split(Z, y, pairs)
    tape = _tape(field, tape)
    cands = sample_paths(starts, ends, degree, num_paths, rng)
    if include_linear:
        line = linear_coeffs(starts, ends, degree)[:, None]
        cands = np.concatenate([line, cands], axis=1)
    values = integrate_coeffs(field, cands, quad)
    worst = np.argmax((dy[:, None] - values) ** 2, axis=1)
    chosen = cands[np.arange(len(dy)), worst]
    integral = integrate_coeffs(field, chosen, quad, tape=tape)
    res = dy - integral
    return (res * res).mean()


def dgi_total_loss(field, Z, y, cfg: LossConfig, rng: np.random.Generator, tape: Tape | None = None) -> Var:
    """Path (or straight-line) reconstruction loss plus weighted balance loss on one batch."""
    tape = _tape(field, tape)
    pairs = pair_indices(len(Z), rng)
    if cfg.num_paths == 0:
        loss = reconstruction_loss(field, Z, y, pairs, cfg.quadrature, tape=tape)
    else:
        loss = path_independence_loss(
            field, Z, y, pairs, cfg.num_paths, cfg.path_degree, cfg.quadrature, rng, tape=tape
        )
    if cfg.balance_weight > 0:
        loss = loss + cfg.balance_weight * balance_loss(field, Z, cfg.balance_pairs, rng, tape=tape)
    return loss
