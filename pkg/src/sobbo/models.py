"""Multilayer perceptrons used as surrogate ``g(ζ) -> R`` and gradient field ``h(ζ) -> R^d``."""

from __future__ import annotations

import json
import os
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.hidden:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.output_dim not in (1, self.input_dim):
            raise ValueError("output_dim must be 1 (surrogate) or input_dim (field)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def is_field(self) -> bool:
        return self.output_dim == self.input_dim and self.output_dim > 1


@dataclass
class MlpModel:
    """Parameters are ``[W0, b0, W1, b1, ...]`` with ``W`` of shape (fan_in, fan_out)."""

    spec: MlpSpec
    params: list[np.ndarray] = field(repr=False)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass on a batch ``Z`` of shape (N, d)."""
        act = _ACTIVATIONS[self.spec.activation]
        a = np.asarray(Z, dtype=np.float64)
        n_layers = len(self.params) // 2
        for layer in range(n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            a = a @ W + b
            if layer < n_layers - 1:
                a = act(a)
        return a

    def on(self, tape: Tape) -> "TapedMlp":
        return TapedMlp(self, tape)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [p.copy() for p in self.params])


class TapedMlp:
    """A model whose parameters are leaves on a tape.

    Calling it with a Var records the forward pass; calling it with an array
    runs the plain numpy forward pass on the current parameter values.
    """

    def __init__(self, model: MlpModel, tape: Tape):
        self.model = model
        self.spec = model.spec
        self.tape = tape
        self.params = [tape.leaf(p) for p in model.params]

    def __call__(self, Z):
        if not isinstance(Z, Var):
            return self.model(Z)
        act = _ACTIVATIONS[self.spec.activation]
        a = Z
        n_layers = len(self.params) // 2
        for layer in range(n_layers):
            a = a @ self.params[2 * layer] + self.params[2 * layer + 1]
            if layer < n_layers - 1:
                a = act(a)
        return a


def init_model(spec: MlpSpec) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    params = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(1.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(spec, params)


def _as_net(model, tape: Tape | None):
    if isinstance(model, TapedMlp):
        return model
    return model.on(tape if tape is not None else Tape())


def _input(net, zeta):
    zeta = ad.value_of(zeta) if not isinstance(zeta, Var) else zeta
    single = len(zeta.shape) == 1
    if zeta.shape[-1] != net.spec.input_dim:
        raise ValueError(f"expected inputs of dimension {net.spec.input_dim}, got {zeta.shape[-1]}")
    if isinstance(zeta, Var):
        Z = zeta.reshape(1, -1) if single else zeta
    else:
        if not np.all(np.isfinite(zeta)):
            raise ValueError("non-finite model input")
        Z = net.tape.const(zeta.reshape(1, -1) if single else zeta)
    return Z, single


def eval_surrogate(model, zeta, tape: Tape | None = None) -> Var:
    """g(ζ) as a tape node: a scalar for a single input, shape (B,) for a batch."""
    net = _as_net(model, tape)
    if net.spec.output_dim != 1:
        raise ValueError("eval_surrogate needs a model with output_dim == 1")
    Z, single = _input(net, zeta)
    out = net(Z)
    return out.reshape(()) if single else out.reshape(-1)


def eval_field(model, zeta, tape: Tape | None = None) -> Var:
    """h(ζ) as a tape node: shape (d,) for a single input, (B, d) for a batch."""
    net = _as_net(model, tape)
    if net.spec.output_dim != net.spec.input_dim:
        raise ValueError("eval_field needs a model with output_dim == input_dim")
    Z, single = _input(net, zeta)
    out = net(Z)
    return out.reshape(-1) if single else out


def input_jacobian(field, Z: Var) -> Var:
    """Stacked input Jacobians, shape (B, d_out, d_in), differentiable w.r.t. parameters.

    Entry ``[k, j, i]`` is dh^j/dζ^i at ``Z[k]``. ``field`` maps (B, d) Vars to (B, d_out) Vars.
    """
    H = field(Z)
    B, d_out = H.shape
    rows = []
    for j in range(d_out):
        (gZ,) = ad.grad(H[:, j].sum(), [Z], create_graph=True)
        rows.append(gZ.reshape(B, 1, Z.shape[1]))
    return ad.concat(rows, axis=1)


def input_jacobian_entry(model, zeta, i: int, j: int, tape: Tape | None = None) -> Var:
    """dh^j/dζ^i at a single point ζ; the node stays differentiable w.r.t. parameters."""
    net = _as_net(model, tape)
    d = net.spec.input_dim
    if not (0 <= i < d and 0 <= j < net.spec.output_dim):
        raise IndexError(f"Jacobian index ({i}, {j}) out of range for d={d}")
    zeta = np.asarray(zeta, dtype=np.float64).reshape(1, d)
    Z = net.tape.leaf(zeta)
    H = net(Z)
    (gZ,) = ad.grad(H[:, j].sum(), [Z], create_graph=True)
    return gZ[0, i]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model: MlpModel, path, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Write spec and parameters to an ``.npz`` container.

    ``extra`` is JSON-serialisable metadata; ``arrays`` are additional named
    float arrays (optimizer moments). Both come back from :func:`load_checkpoint`.
    """
    meta = {"format": "sobbo-mlp", "version": CHECKPOINT_VERSION, "spec": asdict(model.spec), "extra": extra or {}}
    payload = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for k, p in enumerate(model.params):
        payload[f"param_{k}"] = p
    for name, arr in (arrays or {}).items():
        payload[f"extra_{name}"] = np.asarray(arr)
    tmp = str(path) + ".tmp"
    # np.savez stamps members with the wall clock; a fixed date keeps the bytes reproducible
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[MlpModel, dict, dict]:
    """Inverse of :func:`save_model`: returns (model, extra metadata, extra arrays)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "sobbo-mlp":
            raise ValueError(f"{path} is not a model checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
        spec = MlpSpec(**{**meta["spec"], "hidden": tuple(meta["spec"]["hidden"])})
        n = 2 * (len(spec.hidden) + 1)
        params = [np.array(data[f"param_{k}"]) for k in range(n)]
        arrays = {k[len("extra_"):]: np.array(data[k]) for k in data.files if k.startswith("extra_")}
    return MlpModel(spec, params), meta["extra"], arrays


def load_model(path) -> MlpModel:
    return load_checkpoint(path)[0]
