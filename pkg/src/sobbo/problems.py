"""Ground-truth objectives, simulators and offline dataset generation.

Every problem exposes ``g(theta, x)`` on its sampling domain. Closed-form and
neural objectives are written with the array-or-Var operators of
:mod:`sobbo.autodiff`, so one definition gives both fast numpy evaluation
and exact gradients. Simulators are stochastic; their noiseless value is a
Monte Carlo mean under common random numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .models import MlpSpec, init_model


class UnknownProblemError(KeyError):
    pass


class UnstableQueueError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Closed-form test functions on canonical coordinates z, shape (N, d) -> (N,)
# ---------------------------------------------------------------------------


def zakharov(z):
    d = z.shape[1]
    s = z @ (0.5 * np.arange(1, d + 1))
    return (z * z).sum(axis=1) + s ** 2 + s ** 4


def perm(z, beta=0.5):
    d = z.shape[1]
    j = np.arange(1, d + 1, dtype=np.float64)
    out = 0.0
    for i in range(1, d + 1):
        inner = (z ** i) @ (j + beta) - np.sum((j + beta) / j ** i)
        out = out + inner * inner
    return out


def rosenbrock(z):
    a, b = z[:, :-1], z[:, 1:]
    t1 = b - a * a
    t2 = a - 1.0
    return (100.0 * t1 * t1 + t2 * t2).sum(axis=1)


def trid(z):
    t = z - 1.0
    return (t * t).sum(axis=1) - (z[:, 1:] * z[:, :-1]).sum(axis=1)


def dixon_price(z):
    d = z.shape[1]
    first = z[:, 0] - 1.0
    inner = 2.0 * z[:, 1:] ** 2 - z[:, :-1]
    return first * first + (inner * inner) @ np.arange(2, d + 1, dtype=np.float64)


def griewank(z):
    d = z.shape[1]
    prod = 1.0
    for i in range(d):
        prod = prod * ad.cos(z[:, i] / math.sqrt(i + 1))
    return (z * z).sum(axis=1) / 4000.0 - prod + 1.0


def ackley(z, a=20.0, b=0.2, c=2 * math.pi):
    d = z.shape[1]
    r = ad.sqrt((z * z).sum(axis=1) / d)
    return -a * ad.exp(-b * r) - ad.exp(ad.cos(c * z).sum(axis=1) / d) + a + math.e


def welded_beam(z):
    z1, z2, z3, z4 = z[:, 0], z[:, 1], z[:, 2], z[:, 3]
    return 1.10471 * z1 * z1 * z2 + 0.04811 * z3 * z4 * (14.0 + z2)


def pressure_vessel(z):
    z1, z2, z3, z4 = z[:, 0], z[:, 1], z[:, 2], z[:, 3]
    return 0.6224 * z1 * z3 * z4 + 1.7781 * z2 * z3 * z3 + 3.1661 * z1 * z1 * z4 + 19.84 * z1 * z1 * z3


# ---------------------------------------------------------------------------
# Simulators
# ---------------------------------------------------------------------------

NEWSVENDOR_DEFAULTS = {"alpha": 2.0, "beta": 20.0, "price": 9.0, "salvage": 1.0, "mc_samples": 20000, "crn_seed": 7}
MM1_DEFAULTS = {
    "c": 0.1,
    "warmup": 1000,
    "customers": 100_000,
    "eval_customers": 20_000,
    "mc_samples": 1,
    "crn_seed": 11,
    "allow_unstable": True,
}
SAN_DEFAULTS = {"mc_samples": 2000, "crn_seed": 13}


def burr_demand(u, alpha: float, beta: float):
    """Inverse CDF of Burr XII, F(z) = 1 - (1 + z^alpha)^(-beta)."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Burr parameters must be positive")
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        return ((1.0 - u) ** (-1.0 / beta) - 1.0) ** (1.0 / alpha)


def simulate_newsvendor(theta, x, settings: dict | None = None, rng=None, u=None):
    """Realised profit of ordering ``theta`` units at unit cost ``x``.

    ``u`` (uniforms driving the demand draw) may be given to fix the demand.
    """
    s = {**NEWSVENDOR_DEFAULTS, **(settings or {})}
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("order quantity must be >= 0")
    if u is None:
        u = rng.random(np.broadcast_shapes(theta.shape, x.shape))
    demand = burr_demand(u, s["alpha"], s["beta"])
    sold = np.minimum(theta, demand)
    leftover = np.maximum(theta - demand, 0.0)
    return s["price"] * sold + s["salvage"] * leftover - x * theta


def mm1_sojourn(service_rate, arrival_rate, customers: int, warmup: int, rng) -> float:
    """Mean sojourn time of ``customers`` consecutive customers after ``warmup``, Lindley recursion.

    Starts from an empty system. W_{n+1} = max(0, W_n + S_n - A_{n+1}) is
    evaluated in closed form as U_n - min_{k<=n} U_k with U the running sum
    of S - A.
    """
    total = warmup + customers
    service = rng.exponential(1.0 / service_rate, size=total)
    inter = rng.exponential(1.0 / arrival_rate, size=total)
    U = np.concatenate([[0.0], np.cumsum(service[:-1] - inter[1:])])
    wait = U - np.minimum.accumulate(U)
    return float(np.mean(wait[warmup:] + service[warmup:]))


def simulate_mm1(theta, x, settings: dict | None = None, rng=None, allow_unstable: bool | None = None, customers: int | None = None):
    """Objective sample: mean sojourn time plus ``c * theta**2`` (theta = service rate, x = arrival rate)."""
    s = {**MM1_DEFAULTS, **(settings or {})}
    allow = s["allow_unstable"] if allow_unstable is None else allow_unstable
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64)).reshape(-1)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1)
    theta, x = np.broadcast_arrays(theta, x)
    if np.any(x <= 0) or np.any(theta <= 0):
        raise ValueError("rates must be positive")
    if not allow and np.any(theta <= x):
        raise UnstableQueueError("service rate must exceed arrival rate (pass allow_unstable=True to simulate anyway)")
    n = s["customers"] if customers is None else customers
    out = np.array([mm1_sojourn(t, a, n, s["warmup"], rng) for t, a in zip(theta, x)])
    return out + s["c"] * theta ** 2


@lru_cache(maxsize=1)
def san_topology() -> tuple[tuple[str, ...], tuple[tuple[int, int], ...]]:
    """Node names and arcs (as node-index pairs, ordered by arc id) of the shipped network."""
    text = resources.files("sobbo").joinpath("data/san_topology.csv").read_text()
    rows = sorted(csv.DictReader(io.StringIO(text)), key=lambda r: int(r["arc_id"]))
    nodes = sorted({r["src"] for r in rows} | {r["dst"] for r in rows})
    index = {n: k for k, n in enumerate(nodes)}
    arcs = tuple((index[r["src"]], index[r["dst"]]) for r in rows)
    return tuple(nodes), arcs


def _topological_order(n_nodes, arcs):
    indeg = [0] * n_nodes
    for _, b in arcs:
        indeg[b] += 1
    order, ready = [], [k for k in range(n_nodes) if indeg[k] == 0]
    while ready:
        v = ready.pop(0)
        order.append(v)
        for a, b in arcs:
            if a == v:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
    if len(order) != n_nodes:
        raise ValueError("graph has a cycle")
    return order


def longest_path(durations, arcs=None, n_nodes=None, source=0, sink=None):
    """Longest source-to-sink path length by dynamic programming in topological order.

    ``durations`` has shape (..., n_arcs); returns shape (...).
    """
    if arcs is None:
        nodes, arcs = san_topology()
        n_nodes = len(nodes)
    sink = n_nodes - 1 if sink is None else sink
    durations = np.asarray(durations, dtype=np.float64)
    finish = [None] * n_nodes
    finish[source] = np.zeros(durations.shape[:-1])
    for v in _topological_order(n_nodes, arcs):
        for k, (a, b) in enumerate(arcs):
            if b == v and finish[a] is not None:
                cand = finish[a] + durations[..., k]
                finish[v] = cand if finish[v] is None else np.maximum(finish[v], cand)
    if finish[sink] is None:
        raise ValueError("sink unreachable from source")
    return finish[sink]


def enumerate_paths(arcs, source, sink) -> list[list[int]]:
    """Every source-to-sink path as a list of arc indices (depth-first)."""
    out = []

    def walk(v, used):
        if v == sink:
            out.append(list(used))
            return
        for k, (a, b) in enumerate(arcs):
            if a == v:
                walk(b, used + [k])

    walk(source, [])
    return out


def simulate_san(theta, x, rng=None, durations=None):
    """Longest a->i path under exponential arc durations plus sum of 1/mean costs.

    ``theta`` holds the means of arcs 1-8, ``x`` of arcs 9-13. Rows broadcast.
    """
    mu = _san_means(theta, x)
    if np.any(mu <= 0):
        raise ValueError("arc means must be positive")
    if durations is None:
        durations = rng.exponential(1.0, size=mu.shape) * mu
    return longest_path(durations) + (1.0 / mu).sum(axis=-1)


def _san_means(theta, x):
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = max(len(theta), len(x))
    theta = np.broadcast_to(theta, (n, theta.shape[1]))
    x = np.broadcast_to(x, (n, x.shape[1]))
    return np.concatenate([theta, x], axis=1)


# ---------------------------------------------------------------------------
# Problem specifications
# ---------------------------------------------------------------------------


@dataclass
class ProblemSpec:
    """One benchmark objective with its sampling domain.

    ``theta`` and ``x`` are sampled uniformly on [theta_low, theta_high] and
    [x_low, x_high]. For closed-form and neural kinds the raw inputs are
    assembled into ``u`` (ordering given by ``layout``), mapped affinely to
    the canonical box ``z = shift + scale * u`` and the objective is
    ``output_scale * f(z)``.
    """

    name: str
    d_theta: int
    d_x: int
    theta_low: np.ndarray
    theta_high: np.ndarray
    x_low: np.ndarray
    x_high: np.ndarray
    kind: str
    fn: Callable | None = None
    layout: str = "x_theta"
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    output_scale: float = 1.0
    params: dict = field(default_factory=dict)
    regime: str = "scarce"
    default_n: int = 128
    default_s3nr: float = 0.5

    def __post_init__(self):
        for a in ("theta_low", "theta_high", "x_low", "x_high"):
            setattr(self, a, np.asarray(getattr(self, a), dtype=np.float64))
        if self.d_theta < 1 or self.d_x < 1:
            raise ValueError("d_theta and d_x must be >= 1")
        if np.any(self.theta_low >= self.theta_high) or np.any(self.x_low >= self.x_high):
            raise ValueError("domain bounds must be ordered")
        if self.kind not in ("closed_form", "neural", "simulator"):
            raise ValueError(f"unknown problem kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.d_theta + self.d_x

    @property
    def differentiable(self) -> bool:
        return self.kind != "simulator"

    def canonical(self, theta, x):
        """Canonical coordinates z for rows of (theta, x); works on arrays and Vars."""
        parts = [x, theta] if self.layout == "x_theta" else [theta, x]
        u = ad.concat(parts, axis=1)
        if self.shift is None:
            return u
        return u * self.scale + self.shift

    def scaling_constants(self) -> dict:
        return {
            "layout": self.layout,
            "shift": None if self.shift is None else self.shift.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
            "output_scale": self.output_scale,
        }

    def describe(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "d_theta": self.d_theta,
            "d_x": self.d_x,
            "theta_bounds": [self.theta_low.tolist(), self.theta_high.tolist()],
            "x_bounds": [self.x_low.tolist(), self.x_high.tolist()],
            "scaling": self.scaling_constants(),
            "params": {k: v for k, v in self.params.items() if not isinstance(v, np.ndarray)},
        }


def _box(lo, hi, d):
    return np.full(d, float(lo)), np.full(d, float(hi))


def _canonical_box(lo, hi, d):
    return np.full(d, float(lo)), np.full(d, float(hi) - float(lo))


def _fit_output_scale(spec: ProblemSpec, samples: int = 20000, seed: int = 12345) -> float:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(spec.theta_low, spec.theta_high, size=(samples, spec.d_theta))
    x = rng.uniform(spec.x_low, spec.x_high, size=(samples, spec.d_x))
    spec.output_scale = 1.0
    raw = _raw_objective(spec, theta, x)
    return float(1.0 / np.sqrt(np.mean(raw * raw)))


def _raw_objective(spec: ProblemSpec, theta, x):
    z = spec.canonical(theta, x)
    return spec.fn(z)


def _synthetic(name, fn, lo, hi, regime="scarce", default_n=128, **params):
    spec = ProblemSpec(
        name=name,
        d_theta=3,
        d_x=3,
        theta_low=np.zeros(3),
        theta_high=np.ones(3),
        x_low=np.zeros(3),
        x_high=np.ones(3),
        kind="closed_form",
        fn=fn,
        layout="x_theta",
        params=dict(params, canonical_box=[lo, hi]),
        regime=regime,
        default_n=default_n,
        default_s3nr=0.5 if regime == "scarce" else 0.2,
    )
    spec.shift, spec.scale = _canonical_box(lo, hi, 6)
    spec.output_scale = _fit_output_scale(spec)
    return spec


def _bilinear_matrix(seed=2024):
    return np.random.default_rng(seed).normal(size=(3, 3))


def _linear_problem(name, square: bool, regime, default_n):
    S = _bilinear_matrix()

    def fn(z):
        x, theta = z[:, :3], z[:, 3:]
        v = ((x @ S) * theta).sum(axis=1)
        return v * v if square else v

    spec = ProblemSpec(
        name=name,
        d_theta=3,
        d_x=3,
        theta_low=np.zeros(3),
        theta_high=np.ones(3),
        x_low=np.zeros(3),
        x_high=np.ones(3),
        kind="closed_form",
        fn=fn,
        params={"S": S},
        regime=regime,
        default_n=default_n,
        default_s3nr=0.5 if regime == "scarce" else 0.2,
    )
    return spec


def _neural_problem(name, width, seed):
    net = init_model(MlpSpec(6, (width, width), 1, "tanh", seed))

    def fn(z):
        if isinstance(z, Var):
            return net.on(z.tape)(z).reshape(-1)
        return net(z).reshape(-1)

    spec = ProblemSpec(
        name=name,
        d_theta=3,
        d_x=3,
        theta_low=np.zeros(3),
        theta_high=np.ones(3),
        x_low=np.zeros(3),
        x_high=np.ones(3),
        kind="neural",
        fn=fn,
        params={"hidden": [width, width], "weight_seed": seed, "canonical_box": [-1.0, 1.0]},
    )
    spec.shift, spec.scale = _canonical_box(-1.0, 1.0, 6)
    spec.output_scale = _fit_output_scale(spec)
    return spec


def _engineering(name, fn):
    spec = ProblemSpec(
        name=name,
        d_theta=3,
        d_x=1,
        theta_low=np.zeros(3),
        theta_high=np.ones(3),
        x_low=np.zeros(1),
        x_high=np.ones(1),
        kind="closed_form",
        fn=fn,
        layout="theta_x",
    )
    spec.output_scale = _fit_output_scale(spec)
    return spec


def _simulator(name, d_theta, d_x, tlo, thi, xlo, xhi, params, regime, default_n):
    return ProblemSpec(
        name=name,
        d_theta=d_theta,
        d_x=d_x,
        theta_low=np.full(d_theta, tlo),
        theta_high=np.full(d_theta, thi),
        x_low=np.full(d_x, xlo),
        x_high=np.full(d_x, xhi),
        kind="simulator",
        layout="theta_x",
        params=params,
        regime=regime,
        default_n=default_n,
        default_s3nr=math.inf,
    )


_BUILDERS: dict[str, Callable[[], ProblemSpec]] = {
    "linear": lambda: _linear_problem("linear", False, "scarce", 128),
    "quadratic": lambda: _linear_problem("quadratic", True, "large", 20000),
    "nn_small": lambda: _neural_problem("nn_small", 100, 101),
    "nn_large": lambda: _neural_problem("nn_large", 1000, 102),
    "perm": lambda: _synthetic("perm", lambda z: perm(z, 0.5), -1.0, 1.0, beta=0.5),
    "rosenbrock": lambda: _synthetic("rosenbrock", rosenbrock, -2.0, 2.0),
    "zakharov": lambda: _synthetic("zakharov", zakharov, -1.0, 1.0),
    "trid": lambda: _synthetic("trid", trid, -36.0, 36.0),
    "dixon_price": lambda: _synthetic("dixon_price", dixon_price, -10.0, 10.0),
    "griewank": lambda: _synthetic("griewank", griewank, -10.0, 10.0, regime="large", default_n=50000),
    "ackley": lambda: _synthetic("ackley", ackley, -5.0, 5.0, regime="large", default_n=20000),
    "welded_beam": lambda: _engineering("welded_beam", welded_beam),
    "pressure_vessel": lambda: _engineering("pressure_vessel", pressure_vessel),
    "newsvendor": lambda: _simulator("newsvendor", 1, 1, 0.0, 1.0, 2.5, 7.5, dict(NEWSVENDOR_DEFAULTS), "scarce", 128),
    "mm1": lambda: _simulator("mm1", 1, 1, 1.0, 6.0, 1.0, 6.0, dict(MM1_DEFAULTS), "large", 10000),
    "san": lambda: _simulator("san", 8, 5, 0.1, 5.0, 0.1, 5.0, dict(SAN_DEFAULTS), "large", 10000),
}

PROBLEM_NAMES = tuple(_BUILDERS)


@lru_cache(maxsize=None)
def get_problem(name: str) -> ProblemSpec:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise UnknownProblemError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}") from None
    return builder()


def _resolve(spec) -> ProblemSpec:
    return get_problem(spec) if isinstance(spec, str) else spec


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _rows(a, d):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, d) if a.ndim <= 1 else a


def _simulate(spec: ProblemSpec, theta, x, rng):
    """One replication per row. The newsvendor objective is the negated profit (we minimise)."""
    p = spec.params
    if spec.name == "newsvendor":
        return -simulate_newsvendor(theta[:, 0], x[:, 0], p, rng)
    if spec.name == "mm1":
        return simulate_mm1(theta[:, 0], x[:, 0], p, rng)
    if spec.name == "san":
        return simulate_san(theta, x, rng)
    raise UnknownProblemError(spec.name)


def _simulator_mean(spec: ProblemSpec, theta, x):
    """Common-random-number Monte Carlo mean of the simulator at each row."""
    p = spec.params
    reps = int(p.get("mc_samples", 1))
    rng = np.random.default_rng(p.get("crn_seed", 0))
    if spec.name == "newsvendor":
        u = rng.random(reps)
        out = np.empty(len(theta))
        for lo in range(0, len(theta), 512):
            t = theta[lo:lo + 512, :1]
            c = x[lo:lo + 512, :1]
            out[lo:lo + 512] = -simulate_newsvendor(t, c, p, u=u[None, :]).mean(axis=1)
        return out
    if spec.name == "mm1":
        seeds = rng.integers(0, 2**63, size=reps)
        acc = np.zeros(len(theta))
        for s in seeds:
            acc += np.array(
                [
                    simulate_mm1(t, a, p, np.random.default_rng(s), customers=p["eval_customers"])[0]
                    for t, a in zip(theta[:, 0], x[:, 0])
                ]
            )
        return acc / reps
    if spec.name == "san":
        E = rng.exponential(1.0, size=(reps, 13))
        out = np.empty(len(theta))
        mu = _san_means(theta, x)
        for k in range(len(mu)):
            out[k] = simulate_san(mu[k, :8], mu[k, 8:], durations=E * mu[k]).mean()
        return out
    raise UnknownProblemError(spec.name)


def eval_objective(spec, theta, x):
    """Noiseless g(theta, x) for rows of theta (N, d_theta) and x (N, d_x)."""
    spec = _resolve(spec)
    theta = _rows(theta, spec.d_theta)
    x = _rows(x, spec.d_x)
    theta, x = _broadcast_rows(theta, x)
    if spec.kind == "simulator":
        return _simulator_mean(spec, theta, x)
    return spec.output_scale * np.asarray(_raw_objective(spec, theta, x), dtype=np.float64)


def objective_on_tape(spec, theta: Var, x) -> Var:
    """g(theta, x) recorded on theta's tape (closed-form and neural problems only)."""
    spec = _resolve(spec)
    if not spec.differentiable:
        raise TypeError(f"{spec.name} is a simulator; use finite differences")
    return spec.output_scale * _raw_objective(spec, theta, x)


def _broadcast_rows(theta, x):
    if len(theta) == len(x):
        return theta, x
    if len(theta) == 1:
        return np.repeat(theta, len(x), axis=0), x
    if len(x) == 1:
        return theta, np.repeat(x, len(theta), axis=0)
    raise ValueError(f"row counts differ: {len(theta)} vs {len(x)}")


def sample_theta(spec, n: int, rng) -> np.ndarray:
    spec = _resolve(spec)
    return rng.uniform(spec.theta_low, spec.theta_high, size=(n, spec.d_theta))


def sample_x(spec, n: int, rng) -> np.ndarray:
    spec = _resolve(spec)
    return rng.uniform(spec.x_low, spec.x_high, size=(n, spec.d_x))


def eval_true_value(spec, theta, mc_samples: int, rng, x_draws=None):
    """Monte Carlo nu(theta) = E_X g(theta, X) and its standard error.

    ``theta`` may be one design or a batch (T, d_theta); the same X draws are
    shared across the batch. Returns floats for one design, arrays otherwise.
    """
    spec = _resolve(spec)
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta = _rows(theta, spec.d_theta)
    xs = sample_x(spec, mc_samples, rng) if x_draws is None else np.asarray(x_draws, dtype=np.float64)
    m = len(xs)
    means = np.empty(len(theta))
    ses = np.empty(len(theta))
    for k, t in enumerate(theta):
        vals = eval_objective(spec, np.repeat(t[None], m, axis=0), xs)
        means[k] = vals.mean()
        ses[k] = vals.std(ddof=1) / np.sqrt(m) if m > 1 else 0.0
    if single:
        return float(means[0]), float(ses[0])
    return means, ses


def eval_true_gradient(spec, theta, x_set, fd_step: float = 1e-4):
    """(1/|x_set|) sum_x grad_theta g(theta, x).

    Exact (tape) for closed-form and neural problems; central differences on
    the common-random-number simulator mean otherwise. ``theta`` may be a
    batch (T, d_theta); returns the matching shape.
    """
    spec = _resolve(spec)
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta = _rows(theta, spec.d_theta)
    xs = _rows(x_set, spec.d_x)
    T, S = len(theta), len(xs)
    if S == 0:
        raise ValueError("x_set is empty")
    th_rep = np.repeat(theta, S, axis=0)
    x_rep = np.tile(xs, (T, 1))
    if spec.differentiable:
        grads = np.empty_like(th_rep)
        for lo in range(0, len(th_rep), 8192):
            tape = Tape()
            tv = tape.leaf(th_rep[lo:lo + 8192])
            g = objective_on_tape(spec, tv, tape.const(x_rep[lo:lo + 8192]))
            (grads[lo:lo + 8192],) = ad.grad(g.sum(), [tv])
    else:
        grads = np.empty_like(th_rep)
        span = spec.theta_high - spec.theta_low
        for i in range(spec.d_theta):
            h = fd_step * span[i]
            up, dn = th_rep.copy(), th_rep.copy()
            up[:, i] += h
            dn[:, i] -= h
            grads[:, i] = (eval_objective(spec, up, x_rep) - eval_objective(spec, dn, x_rep)) / (2 * h)
    out = grads.reshape(T, S, spec.d_theta).mean(axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Noise and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    target_s3nr: float
    sigma2: float
    estimation_samples: int
    signal_power: float = float("nan")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


# Heavy-tailed objectives such as Zakharov need ~1e5 draws to pin E[g^2] to a
# few percent; simulators are too slow for that and use fewer.
CALIBRATION_SAMPLES = {"closed_form": 100_000, "neural": 20_000, "simulator": 10_000}


def calibrate_noise(spec, target_s3nr: float, samples: int, rng) -> NoiseModel:
    """Gaussian noise variance giving E[g^2] / E[eps^2] == target_s3nr."""
    spec = _resolve(spec)
    if not target_s3nr > 0:
        raise ValueError("target S3NR must be > 0")
    if math.isinf(target_s3nr):
        return NoiseModel(target_s3nr, 0.0, 0)
    theta = sample_theta(spec, samples, rng)
    x = sample_x(spec, samples, rng)
    power = float(np.mean(eval_objective(spec, theta, x) ** 2))
    if power < 1e-12:
        raise ValueError(f"{spec.name}: E[g^2] is ~0, cannot calibrate a signal-to-noise ratio")
    return NoiseModel(target_s3nr, power / target_s3nr, samples, power)


@dataclass
class OfflineDataset:
    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if not (len(self.theta) == len(self.x) == len(self.y)):
            raise ValueError("theta, x and y must have the same number of rows")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("dataset contains non-finite y")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d_theta(self) -> int:
        return self.theta.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def zeta(self) -> np.ndarray:
        """Model inputs (theta, x) stacked column-wise."""
        return np.concatenate([self.theta, self.x], axis=1)

    def header(self) -> list[str]:
        return [f"theta_{i}" for i in range(self.d_theta)] + [f"x_{i}" for i in range(self.d_x)] + ["y"]

    def to_csv(self, path) -> Path:
        """Write ``path`` (CSV) and ``path`` with ``.json`` suffix (provenance sidecar)."""
        path = Path(path)
        rows = np.concatenate([self.theta, self.x, self.y[:, None]], axis=1)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.header()) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")
        return sidecar

    @classmethod
    def from_csv(cls, path) -> "OfflineDataset":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d_theta = sum(h.startswith("theta_") for h in header)
        d_x = sum(h.startswith("x_") for h in header)
        sidecar = path.with_suffix(".json")
        prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(data[:, :d_theta], data[:, d_theta:d_theta + d_x], data[:, -1], prov)


def generate_dataset(spec, n: int, noise: NoiseModel | float | None, seed: int) -> OfflineDataset:
    """n i.i.d. records with theta, x uniform on the domain and y = g + N(0, sigma^2).

    Simulator problems draw y from one fresh replication (their intrinsic
    noise) before any Gaussian noise is added. ``noise`` may be a NoiseModel
    or a target S3NR (calibrated here with CALIBRATION_SAMPLES draws from the
    seed's stream).
    """
    spec = _resolve(spec)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if noise is None:
        noise = spec.default_s3nr
    if not isinstance(noise, NoiseModel):
        samples = CALIBRATION_SAMPLES[spec.kind]
        noise = calibrate_noise(spec, float(noise), samples, np.random.default_rng([seed, 1]))
    theta = sample_theta(spec, n, rng)
    x = sample_x(spec, n, rng)
    if spec.kind == "simulator":
        g = _simulate(spec, theta, x, rng)
    else:
        g = eval_objective(spec, theta, x)
    y = g + rng.normal(0.0, noise.sigma, size=n) if noise.sigma2 > 0 else g.copy()
    prov = {
        "problem": spec.name,
        "seed": int(seed),
        "n": int(n),
        "s3nr": "inf" if math.isinf(noise.target_s3nr) else noise.target_s3nr,
        "sigma2": noise.sigma2,
        "domain": spec.describe(),
    }
    return OfflineDataset(theta, x, y, prov)
