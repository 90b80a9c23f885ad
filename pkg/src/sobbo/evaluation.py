"""Gradient estimation from trained models, gradient-quality metrics and design optimization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .models import MlpModel
from .problems import (
    OfflineDataset,
    ProblemSpec,
    _resolve,
    eval_objective,
    eval_true_gradient,
    objective_on_tape,
    sample_theta,
    sample_x,
)

ABS_FALLBACK = 1e-9


@dataclass
class GradientEstimator:
    """Turns a trained model into theta-gradient estimates averaged over x.

    ``kind`` is "ETD" (surrogate, differentiated on a tape), "DGI" (field,
    first ``d_theta`` outputs read off) or "fn" (``fn(theta_rows, x_rows)``
    returning per-row theta gradients; used to wrap oracles).
    """

    kind: str
    d_theta: int
    x_pool: np.ndarray
    model: MlpModel | None = None
    fn: Callable | None = None

    def __post_init__(self):
        self.x_pool = np.atleast_2d(np.asarray(self.x_pool, dtype=np.float64))
        if len(self.x_pool) == 0:
            raise ValueError("x_pool is empty")
        if self.kind not in ("ETD", "DGI", "fn"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "fn":
            if self.fn is None:
                raise ValueError("kind 'fn' needs fn")
            return
        if self.model is None:
            raise ValueError(f"{self.kind} estimator needs a model")
        spec = self.model.spec
        if spec.input_dim != self.d_theta + self.x_pool.shape[1]:
            raise ValueError(f"model input dim {spec.input_dim} != d_theta + d_x = {self.d_theta + self.x_pool.shape[1]}")
        if self.kind == "ETD" and spec.output_dim != 1:
            raise ValueError("ETD estimator needs a scalar surrogate")
        if self.kind == "DGI" and spec.output_dim != spec.input_dim:
            raise ValueError("DGI estimator needs a gradient-field model")

    @classmethod
    def from_model(cls, model: MlpModel, d_theta: int, x_pool) -> "GradientEstimator":
        kind = "ETD" if model.spec.output_dim == 1 else "DGI"
        return cls(kind, d_theta, x_pool, model=model)


def _row_grads(est: GradientEstimator, th_rows, x_rows, chunk=1 << 15):
    if est.kind == "fn":
        return np.asarray(est.fn(th_rows, x_rows), dtype=np.float64)
    if est.kind == "DGI":
        return est.model(np.concatenate([th_rows, x_rows], axis=1))[:, : est.d_theta]
    out = np.empty_like(th_rows)
    for lo in range(0, len(th_rows), chunk):
        tape = Tape()
        net = est.model.on(tape)
        tv = tape.leaf(th_rows[lo:lo + chunk])
        g = net(ad.concat([tv, tape.const(x_rows[lo:lo + chunk])], axis=1))
        (out[lo:lo + chunk],) = ad.grad(g.sum(), [tv])
    return out


def estimate_gradient(est: GradientEstimator, theta, x_subset=None) -> np.ndarray:
    """Mean over ``x_subset`` (default: the whole pool) of the estimated theta-gradient.

    ``theta`` is one design (d_theta,) or a batch (T, d_theta); the result has
    the same shape.
    """
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    th = np.atleast_2d(theta)
    if th.shape[1] != est.d_theta:
        raise ValueError(f"theta has dimension {th.shape[1]}, expected {est.d_theta}")
    xs = est.x_pool if x_subset is None else np.atleast_2d(np.asarray(x_subset, dtype=np.float64))
    if len(xs) == 0:
        raise ValueError("x_subset is empty")
    if xs.shape[1] != est.x_pool.shape[1]:
        raise ValueError(f"x has dimension {xs.shape[1]}, expected {est.x_pool.shape[1]}")
    T, S = len(th), len(xs)
    g = _row_grads(est, np.repeat(th, S, axis=0), np.tile(xs, (T, 1)))
    out = g.reshape(T, S, est.d_theta).mean(axis=1)
    return out[0] if single else out


def cosine_similarity(a, b, axis: int = -1):
    """Dot-product cosine along ``axis``; NaN where either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=axis)
    nb = np.linalg.norm(b, axis=axis)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(denom > 0, np.sum(a * b, axis=axis) / np.where(denom > 0, denom, 1.0), np.nan)
    c = np.clip(c, -1.0, 1.0)
    return float(c) if np.ndim(c) == 0 else c


def norm_distance(a, b, axis: int = -1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = np.linalg.norm(a - b, axis=axis)
    return float(d) if np.ndim(d) == 0 else d


class GradientProbe:
    """Fixed evaluation set: sampled thetas, one x subset and the true gradients there.

    Calling the probe with a model (or estimator) returns the mean cosine
    similarity (zero vectors excluded) and mean norm distance.
    """

    def __init__(self, spec, x_pool, n_thetas: int, x_subset_size: int | None, rng: np.random.Generator):
        self.spec = _resolve(spec)
        x_pool = np.atleast_2d(np.asarray(x_pool, dtype=np.float64))
        self.x_pool = x_pool
        if x_subset_size is None or x_subset_size >= len(x_pool):
            self.x_subset = x_pool
        else:
            self.x_subset = x_pool[np.sort(rng.choice(len(x_pool), size=x_subset_size, replace=False))]
        self.thetas = sample_theta(self.spec, n_thetas, rng)
        self.truth = eval_true_gradient(self.spec, self.thetas, self.x_subset)

    def metrics(self, est: GradientEstimator) -> tuple[float, float]:
        estimate = estimate_gradient(est, self.thetas, self.x_subset)
        cs = cosine_similarity(self.truth, estimate)
        nd = norm_distance(self.truth, estimate)
        cs = np.atleast_1d(cs)
        finite = cs[np.isfinite(cs)]
        return (float(finite.mean()) if len(finite) else math.nan, float(np.mean(nd)))

    def __call__(self, model) -> tuple[float, float]:
        if not isinstance(model, GradientEstimator):
            model = GradientEstimator.from_model(model, self.spec.d_theta, self.x_pool)
        return self.metrics(model)


def evaluate_gradients(est: GradientEstimator, spec, n_thetas: int, x_subset_size: int | None, rng) -> tuple[float, float]:
    """Mean (cos_sim, norm_dist) of ``est`` against the true gradient over fresh thetas."""
    probe = GradientProbe(spec, est.x_pool, n_thetas, x_subset_size, rng)
    return probe.metrics(est)


def true_gradient_estimator(spec, x_pool) -> GradientEstimator:
    """Estimator whose per-row gradients are the objective's exact theta-gradients."""
    spec = _resolve(spec)
    if not spec.differentiable:
        raise TypeError(f"{spec.name} has no exact gradient")
    return GradientEstimator("fn", spec.d_theta, x_pool, fn=lambda th, xs: _exact_rows(spec, th, xs))


def _exact_rows(spec, th, xs):
    tape = Tape()
    tv = tape.leaf(th)
    g = objective_on_tape(spec, tv, tape.const(xs))
    (out,) = ad.grad(g.sum(), [tv])
    return out


# ---------------------------------------------------------------------------
# True values, baselines and design optimization
# ---------------------------------------------------------------------------


class TrueValueOracle:
    """nu(theta) by Monte Carlo over one fixed set of x draws (shared by every method)."""

    def __init__(self, spec, mc_samples: int = 10000, seed: int = 0):
        self.spec = _resolve(spec)
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.x_draws = sample_x(self.spec, mc_samples, np.random.default_rng(seed))

    def __call__(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        m = len(self.x_draws)
        out = np.empty(len(theta))
        per = max(1, (1 << 18) // m)
        for lo in range(0, len(theta), per):
            th = theta[lo:lo + per]
            vals = eval_objective(self.spec, np.repeat(th, m, axis=0), np.tile(self.x_draws, (len(th), 1)))
            out[lo:lo + per] = vals.reshape(len(th), m).mean(axis=1)
        return out

    def gradient(self, theta, x_count: int = 1000) -> np.ndarray:
        return eval_true_gradient(self.spec, np.atleast_2d(theta), self.x_draws[:x_count])


@dataclass(frozen=True)
class InferenceConfig:
    """Projected Adam on theta. ``gd_lr`` is in units of the box width per coordinate."""

    init: str = "R"
    gd_steps: int = 200
    gd_lr: float = 0.01
    x_subset_size: int | None = 128
    attempts: int = 128

    def __post_init__(self):
        if self.init not in ("R", "G"):
            raise ValueError("init must be 'R' or 'G'")
        if self.gd_steps < 1:
            raise ValueError("gd_steps must be >= 1")
        if not self.gd_lr > 0:
            raise ValueError("gd_lr must be > 0")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


def greedy_start(dataset: OfflineDataset) -> np.ndarray:
    return dataset.theta[int(np.argmin(dataset.y))]


def initial_designs(dataset: OfflineDataset, spec, init: str, M: int, rng) -> np.ndarray:
    """Start points for M attempts.

    R: dataset thetas drawn uniformly (with replacement). G: the design with
    the smallest observed y; attempt j adds uniform noise of radius
    0.01 * j / M box widths (attempt 0 is the exact point), then clips.
    """
    spec = _resolve(spec)
    if init == "R":
        return dataset.theta[rng.integers(0, len(dataset), size=M)].copy()
    if init != "G":
        raise ValueError("init must be 'R' or 'G'")
    width = spec.theta_high - spec.theta_low
    radius = 0.01 * np.arange(M)[:, None] / M
    noise = rng.uniform(-1.0, 1.0, size=(M, spec.d_theta)) * radius * width
    return np.clip(greedy_start(dataset) + noise, spec.theta_low, spec.theta_high)


def projected_adam(grad_fn, theta0, low, high, steps: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Projected Adam on a batch of designs; step sizes scale with (high - low)."""
    theta = np.clip(np.asarray(theta0, dtype=np.float64).copy(), low, high)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    width = high - low
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        theta = np.clip(theta - lr * width * step, low, high)
    return theta


@dataclass
class OptimizationEntry:
    method: str
    init: str
    values: np.ndarray
    final_thetas: np.ndarray = field(repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def optimize_design(
    est: GradientEstimator,
    dataset: OfflineDataset,
    spec,
    cfg: InferenceConfig,
    oracle: TrueValueOracle,
    rng: np.random.Generator,
    method: str = "",
) -> OptimizationEntry:
    """``cfg.attempts`` projected-Adam runs driven by ``est``; true values of the end points."""
    spec = _resolve(spec)
    starts = initial_designs(dataset, spec, cfg.init, cfg.attempts, rng)
    pool = est.x_pool
    if cfg.x_subset_size is not None and cfg.x_subset_size < len(pool):
        xs = pool[np.sort(rng.choice(len(pool), size=cfg.x_subset_size, replace=False))]
    else:
        xs = pool
    final = projected_adam(
        lambda th: estimate_gradient(est, th, xs), starts, spec.theta_low, spec.theta_high, cfg.gd_steps, cfg.gd_lr
    )
    return OptimizationEntry(method or est.kind, cfg.init, oracle(final), final)


def baseline_random_search(spec, M: int, oracle: TrueValueOracle, rng) -> float:
    """Mean true value of M uniform designs."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return float(np.mean(oracle(sample_theta(spec, M, rng))))


def baseline_dataset_oracle(dataset: OfflineDataset, oracle: TrueValueOracle) -> float:
    """Best true value among the dataset's designs."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.min(oracle(dataset.theta)))


def normalize_score(y: float, x_star: float) -> tuple[float, bool]:
    """(y - x*) / |x*|, or the plain difference (flag True) when |x*| < 1e-9."""
    if abs(x_star) < ABS_FALLBACK:
        return float(y - x_star), True
    return float((y - x_star) / abs(x_star)), False


def reference_optimum(
    spec,
    oracle: TrueValueOracle,
    starts: int = 16,
    steps: int = 500,
    lr: float = 0.01,
    extra_starts=None,
    seed: int = 0,
    x_count: int = 1000,
) -> tuple[float, np.ndarray]:
    """Best true value found by projected Adam on the true objective from several starts.

    Gradients average the exact theta-gradient over the oracle's first
    ``x_count`` draws (finite differences for simulators).
    """
    spec = _resolve(spec)
    rng = np.random.default_rng(seed)
    th0 = sample_theta(spec, starts, rng)
    if extra_starts is not None:
        th0 = np.concatenate([np.atleast_2d(extra_starts), th0], axis=0)
    final = projected_adam(lambda th: oracle.gradient(th, x_count), th0, spec.theta_low, spec.theta_high, steps, lr)
    vals = oracle(final)
    k = int(np.argmin(vals))
    return float(vals[k]), final[k]
