"""Surrogate (ETD) and gradient-field (DGI) trainers with Adam updates.

Both trainers draw minibatches uniformly with replacement from one
``numpy.random.Generator`` seeded by ``TrainConfig.seed``. The same generator
feeds pair and path sampling in the DGI loss, so a run is a pure function of
(dataset, config). Checkpoints store the generator state and Adam moments, and
resuming from one reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .losses import LossConfig, dgi_total_loss, erm_loss
from .models import MlpModel, MlpSpec, init_model, load_checkpoint, save_model
from .paths import QuadratureSpec
from .problems import OfflineDataset

DEFAULT_BALANCE_WEIGHT = 10.0
DEFAULT_HIDDEN = (500, 500, 500)
DIVERGENCE_FACTOR = 1e6

DGI_VARIANTS = ("naive", "path1", "path64", "path1/bal", "full", "custom")
METHODS = ("ETD",) + tuple(f"DGI-{v}" for v in DGI_VARIANTS)


class TrainingError(RuntimeError):
    """Numeric failure during training; carries the step and batch indices."""

    def __init__(self, message: str, step: int, batch: np.ndarray | None = None):
        detail = f"{message} at step {step}"
        if batch is not None:
            detail += f" (batch indices {np.asarray(batch).tolist()})"
        super().__init__(detail)
        self.step = step
        self.batch = batch


class DivergenceError(TrainingError):
    pass


def variant_loss_config(
    method: str,
    balance_weight: float = DEFAULT_BALANCE_WEIGHT,
    path_degree: int = 10,
    quadrature: QuadratureSpec = QuadratureSpec(),
    balance_pairs: int | None = None,
    num_paths: int | None = None,
) -> LossConfig:
    """LossConfig for a named DGI variant.

    naive: no balance, straight line only; path1 / path64: 1 / 64 random
    paths, no balance; path1/bal: 1 path with balance; full: 64 paths with
    balance. ``custom`` takes ``balance_weight`` and ``num_paths`` verbatim
    (used by ablation sweeps).
    """
    variant = method[4:] if method.startswith("DGI-") else method
    table = {
        "naive": (0.0, 0),
        "path1": (0.0, 1),
        "path64": (0.0, 64),
        "path1/bal": (balance_weight, 1),
        "full": (balance_weight, 64),
    }
    if variant == "custom":
        if num_paths is None:
            raise ValueError("DGI-custom needs num_paths")
        alpha, paths = balance_weight, num_paths
    elif variant in table:
        alpha, paths = table[variant]
        if variant in ("path1/bal", "full") and not alpha > 0:
            raise ValueError(f"DGI-{variant} needs a positive balance weight")
    else:
        raise ValueError(f"unknown DGI variant {method!r}; known: {', '.join(DGI_VARIANTS)}")
    return LossConfig(alpha, paths, path_degree, quadrature, balance_pairs)


@dataclass(frozen=True)
class TrainConfig:
    """One training run. ``loss_cfg`` is ignored for ETD and derived from ``method`` when None."""

    method: str = "ETD"
    learning_rate: float = 5e-4
    batch_size: int = 32
    steps: int = 2000
    loss_cfg: LossConfig | None = None
    eval_every: int = 20
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; known: {', '.join(METHODS)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.is_dgi and self.loss_cfg is None:
            object.__setattr__(self, "loss_cfg", variant_loss_config(self.method))

    @property
    def is_dgi(self) -> bool:
        return self.method.startswith("DGI-")

    def model_spec(self, dim: int) -> MlpSpec:
        return MlpSpec(dim, self.hidden, dim if self.is_dgi else 1, self.activation, self.seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lc = d.get("loss_cfg")
        if isinstance(lc, dict):
            lc = dict(lc)
            q = lc.get("quadrature")
            if isinstance(q, dict):
                lc["quadrature"] = QuadratureSpec(**q)
            d["loss_cfg"] = LossConfig(**lc)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new params, state). ``state`` is updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + state.eps))
    return out, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("step", "loss", "cos_sim", "norm_dist")


@dataclass
class TraceRow:
    step: int
    loss: float
    cos_sim: float
    norm_dist: float


@dataclass
class TrainResult:
    model: MlpModel
    trace: list[TraceRow]
    config: TrainConfig
    checkpoints: list[Path] = field(default_factory=list)

    def trace_array(self) -> np.ndarray:
        return np.array([[r.step, r.loss, r.cos_sim, r.norm_dist] for r in self.trace], dtype=np.float64)


Evaluator = Callable[[MlpModel], tuple[float, float]]


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.step, repr(float(r.loss)), repr(float(r.cos_sim)), repr(float(r.norm_dist))])


def read_trace(path) -> list[TraceRow]:
    with open(path) as fh:
        return [
            TraceRow(int(r["step"]), float(r["loss"]), float(r["cos_sim"]), float(r["norm_dist"]))
            for r in csv.DictReader(fh)
        ]


def _batch_loss(tape: Tape, net, dataset_Z, dataset_y, idx, cfg: TrainConfig, rng):
    Z, y = dataset_Z[idx], dataset_y[idx]
    if cfg.is_dgi:
        return dgi_total_loss(net, Z, y, cfg.loss_cfg, rng, tape=tape)
    return erm_loss(net, Z, y, tape=tape)


def checkpoint_path(directory, step: int) -> Path:
    return Path(directory) / f"ckpt_{step:06d}.npz"


def _save(directory, step, model, state, rng, trace, initial_loss, cfg) -> Path:
    path = checkpoint_path(directory, step)
    extra = {
        "step": step,
        "adam_t": state.t,
        "rng_state": rng.bit_generator.state,
        "initial_loss": initial_loss,
        "config": cfg.to_dict(),
        "trace": [asdict(r) for r in trace],
    }
    arrays = {f"m_{k}": m for k, m in enumerate(state.m)}
    arrays.update({f"v_{k}": v for k, v in enumerate(state.v)})
    save_model(model, path, extra=_json_safe(extra), arrays=arrays)
    return path


def _json_safe(obj):
    # NaN is not valid JSON; keep it as a string and restore on load
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _restore_float(v):
    return float(v) if isinstance(v, str) else v


def train(
    dataset: OfflineDataset,
    cfg: TrainConfig,
    evaluator: Evaluator | None = None,
    checkpoint_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on the method's loss.

    A trace row (and a checkpoint when ``checkpoint_dir`` is given) is
    emitted at step 0, every ``eval_every`` steps and at the last step. The
    ``loss`` column holds the minibatch loss of the update that produced the
    row (NaN at step 0); ``evaluator(model) -> (cos_sim, norm_dist)`` fills
    the metric columns (NaN without an evaluator).
    """
    if len(dataset) < 1:
        raise ValueError("empty dataset")
    Z = dataset.zeta
    y = dataset.y
    n, d = Z.shape
    if cfg.is_dgi and d < 2 and cfg.loss_cfg.balance_weight > 0:
        raise ValueError("balance loss needs input dimension >= 2")

    if resume_from is not None:
        model, extra, arrays = load_checkpoint(resume_from)
        saved = TrainConfig.from_dict(extra["config"])
        if saved != cfg:
            raise ValueError("checkpoint was written by a different training config")
        n_p = len(model.params)
        state = AdamState([arrays[f"m_{k}"] for k in range(n_p)], [arrays[f"v_{k}"] for k in range(n_p)], extra["adam_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = extra["rng_state"]
        start = int(extra["step"])
        initial_loss = _restore_float(extra["initial_loss"])
        trace = [TraceRow(**{k: _restore_float(v) for k, v in r.items()}) for r in extra["trace"]]
    else:
        model = init_model(cfg.model_spec(d))
        state = AdamState.zeros_like(model.params)
        rng = np.random.default_rng(cfg.seed)
        start = 0
        initial_loss = None
        trace = []

    checkpoints: list[Path] = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def emit(step, loss):
        cs, nd = evaluator(model) if evaluator is not None else (math.nan, math.nan)
        trace.append(TraceRow(step, float(loss), float(cs), float(nd)))
        if checkpoint_dir is not None:
            checkpoints.append(_save(checkpoint_dir, step, model, state, rng, trace, initial_loss, cfg))

    if start == 0 and not trace:
        emit(0, math.nan)

    for step in range(start + 1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        tape = Tape()
        net = model.on(tape)
        try:
            loss = _batch_loss(tape, net, Z, y, idx, cfg, rng)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError("non-finite loss", step, idx)
            grads = ad.grad(loss, net.params)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value in {exc}", step, idx) from exc
        if initial_loss is None:
            initial_loss = value
        elif initial_loss > 0 and value > DIVERGENCE_FACTOR * initial_loss:
            raise DivergenceError(f"loss {value:.3e} exceeds {DIVERGENCE_FACTOR:.0e} x initial {initial_loss:.3e}", step, idx)
        try:
            model.params, state = adam_step(model.params, grads, state, cfg.learning_rate)
        except FloatingPointError as exc:
            raise TrainingError(str(exc), step, idx) from exc
        if step % cfg.eval_every == 0 or step == cfg.steps:
            emit(step, value)

    return TrainResult(model, trace, cfg, checkpoints)


def train_etd(dataset: OfflineDataset, cfg: TrainConfig, **kwargs) -> TrainResult:
    if cfg.method != "ETD":
        raise ValueError("train_etd needs method 'ETD'")
    return train(dataset, cfg, **kwargs)


def train_dgi(dataset: OfflineDataset, cfg: TrainConfig, **kwargs) -> TrainResult:
    if not cfg.is_dgi:
        raise ValueError("train_dgi needs a DGI method")
    return train(dataset, cfg, **kwargs)


def config_diff(a: TrainConfig, b: TrainConfig) -> dict:
    """Fields (loss config fields flattened as ``loss_cfg.<name>``) whose values differ."""

    def flat(c):
        out = {k: v for k, v in c.to_dict().items() if k != "loss_cfg"}
        for k, v in (c.to_dict()["loss_cfg"] or {}).items():
            out[f"loss_cfg.{k}"] = v
        return out

    fa, fb = flat(a), flat(b)
    return {k: (fa.get(k), fb.get(k)) for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)


def dumps_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
