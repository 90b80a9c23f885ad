"""Reverse-mode automatic differentiation on an append-only tape.

Values are float64 numpy arrays. Every operation applied to a :class:`Var`
appends one record to its :class:`Tape`; records only reference earlier
records, so the tape is a DAG in topological order by construction.

Backward rules are written with the same operator vocabulary that forward
code uses, so they run on plain arrays (first order) or on tape variables
(``create_graph=True``). In the second case the gradient is itself a tape
expression and can be differentiated again::

    tape = Tape()
    x = tape.leaf(2.0)
    y = x * x * x
    (dy,) = grad(y, [x], create_graph=True)   # 3x^2, recorded on the tape
    (d2y,) = grad(dy, [x])                    # 6x -> 12.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tape",
    "Var",
    "GradRequest",
    "forward",
    "backward",
    "grad",
    "tanh",
    "relu",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "square",
    "concat",
    "dot",
    "matmul",
    "sum_to",
    "is_var",
    "value_of",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, node: int):
        self.op = op
        self.node = node
        super().__init__(f"{op} produced a non-finite value at node {node}")


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Tape:
    """Append-only record of operations.

    ``ops[i]``, ``inputs[i]``, ``values[i]`` and ``attrs[i]`` describe node ``i``.
    A tape has a single writer; independent computations use independent tapes.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[dict] = []

    def __len__(self) -> int:
        return len(self.ops)

    def leaf(self, value) -> "Var":
        """Record an input value (parameter, data or constant)."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf", len(self.ops))
        return self._append("leaf", (), arr, {})

    const = leaf

    def apply(self, op: str, inputs: Sequence["Var"], **attrs) -> "Var":
        """Run forward rule ``op`` on ``inputs`` and record the result."""
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: operands live on different tapes")
        fwd = _FORWARD[op]
        vals = [self.values[v.id] for v in inputs]
        try:
            with np.errstate(all="ignore"):
                out = fwd(*vals, **attrs)
        except ShapeError:
            raise
        except ValueError as exc:
            raise ShapeError(op, [v.shape for v in vals], str(exc)) from None
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op, len(self.ops))
        return self._append(op, tuple(v.id for v in inputs), out, attrs)

    def _append(self, op, inputs, value, attrs) -> "Var":
        self.ops.append(op)
        self.inputs.append(inputs)
        self.values.append(value)
        self.attrs.append(attrs)
        return Var(self, len(self.ops) - 1)

    def var(self, node: int) -> "Var":
        return Var(self, node)


class Var:
    """Handle to one node of a tape; supports numpy-style arithmetic."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, tape: Tape, node: int):
        self.tape = tape
        self.id = node

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.ops[self.id]!r}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    # arithmetic
    def __add__(self, other):
        return self.tape.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.apply("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.apply("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.apply("mul", [self._lift(other), self])

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self * other ** -1
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return self._lift(other) * self ** -1

    def __neg__(self):
        return self.tape.apply("neg", [self])

    def __pow__(self, p):
        if not float(p).is_integer():
            raise TypeError("only integer powers are supported")
        return self.tape.apply("pow", [self], p=int(p))

    def __matmul__(self, other):
        return self.tape.apply("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", [self._lift(other), self])

    def __getitem__(self, index):
        return self.tape.apply("getitem", [self], index=index)

    # shape manipulation and reductions
    @property
    def T(self):
        return self.tape.apply("transpose", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", [self], shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def broadcast_to(self, shape):
        return self.tape.apply("broadcast_to", [self], shape=tuple(shape))


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    """Numeric value of a Var, or the argument itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Forward and backward rules
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _rule(name, fwd, bwd):
    _FORWARD[name] = fwd
    _BACKWARD[name] = bwd


def _shape(x) -> tuple:
    return x.shape if isinstance(x, Var) else np.shape(x)


def sum_to(g, shape):
    """Reduce a broadcast gradient ``g`` back to ``shape``."""
    shape = tuple(shape)
    gshape = _shape(g)
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and gshape[lead + i] != 1:
            axes.append(lead + i)
    out = g.sum(axis=tuple(axes), keepdims=True) if axes else g
    return out.reshape(shape)


def _broadcast(g, shape):
    if isinstance(g, Var):
        return g.broadcast_to(shape)
    return np.broadcast_to(g, shape)


def _elementwise_pair(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("broadcast", [a.shape, b.shape]) from None


def _fwd_add(a, b):
    _elementwise_pair(a, b)
    return a + b


def _fwd_sub(a, b):
    _elementwise_pair(a, b)
    return a - b


def _fwd_mul(a, b):
    _elementwise_pair(a, b)
    return a * b


_rule("add", _fwd_add, lambda g, ins, out, at: (sum_to(g, _shape(ins[0])), sum_to(g, _shape(ins[1]))))
_rule("sub", _fwd_sub, lambda g, ins, out, at: (sum_to(g, _shape(ins[0])), sum_to(-g, _shape(ins[1]))))
_rule(
    "mul",
    _fwd_mul,
    lambda g, ins, out, at: (sum_to(g * ins[1], _shape(ins[0])), sum_to(g * ins[0], _shape(ins[1]))),
)
_rule("neg", lambda a: -a, lambda g, ins, out, at: (-g,))


def _bwd_pow(g, ins, out, at):
    p = at["p"]
    if p == 0:
        return (g * 0.0,)
    if p == 1:
        return (g,)
    x = ins[0]
    return (g * (p * x ** (p - 1)),)


def _fwd_pow(a, p):
    return a ** float(p)


_rule("pow", _fwd_pow, _bwd_pow)


def _fwd_matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return a @ b


def _bwd_matmul(g, ins, out, at):
    a, b = ins
    na, nb = len(_shape(a)), len(_shape(b))
    if na == 2 and nb == 2:
        return g @ b.T, a.T @ g
    if na == 2 and nb == 1:
        return g.reshape(-1, 1) @ b.reshape(1, -1), a.T @ g
    if na == 1 and nb == 2:
        return b @ g, a.reshape(-1, 1) @ g.reshape(1, -1)
    return g * b, g * a


_rule("matmul", _fwd_matmul, _bwd_matmul)


def _fwd_transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", [a.shape], "expected a matrix")
    return a.T


_rule("transpose", _fwd_transpose, lambda g, ins, out, at: (g.T,))
_rule("reshape", lambda a, shape: a.reshape(shape), lambda g, ins, out, at: (g.reshape(_shape(ins[0])),))


def _bwd_sum(g, ins, out, at):
    shape = _shape(ins[0])
    axis = at["axis"]
    if axis is None:
        kept = (1,) * len(shape)
    else:
        axes = {a % len(shape) for a in np.atleast_1d(axis)}
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return (_broadcast(g.reshape(kept), shape),)


def _fwd_sum(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims)


_rule("sum", _fwd_sum, _bwd_sum)
_rule(
    "broadcast_to",
    lambda a, shape: np.array(np.broadcast_to(a, shape)),
    lambda g, ins, out, at: (sum_to(g, _shape(ins[0])),),
)


def _fwd_getitem(a, index):
    return np.array(a[index])


def _scatter(g, index, shape):
    if isinstance(g, Var):
        return g.tape.apply("scatter", [g], index=index, shape=tuple(shape))
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return out


_rule("getitem", _fwd_getitem, lambda g, ins, out, at: (_scatter(g, at["index"], _shape(ins[0])),))


def _fwd_scatter(a, index, shape):
    out = np.zeros(shape)
    np.add.at(out, index, a)
    return out


_rule("scatter", _fwd_scatter, lambda g, ins, out, at: (g[at["index"]],))


def _fwd_concat(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [a.shape for a in arrays]) from None


def _bwd_concat(g, ins, out, at):
    axis = at["axis"]
    ndim = len(_shape(ins[0]))
    axis = axis % ndim
    grads, start = [], 0
    for x in ins:
        n = _shape(x)[axis]
        index = (slice(None),) * axis + (slice(start, start + n),)
        grads.append(g[index])
        start += n
    return tuple(grads)


_rule("concat", _fwd_concat, _bwd_concat)

# elementwise functions; ``out`` is the op's own output (array or Var)
_rule("tanh", np.tanh, lambda g, ins, out, at: (g * (1.0 - out * out),))
_rule("relu", lambda a: np.maximum(a, 0.0), lambda g, ins, out, at: (g * (value_of(ins[0]) > 0).astype(np.float64),))
_rule("exp", np.exp, lambda g, ins, out, at: (g * out,))
_rule("log", np.log, lambda g, ins, out, at: (g / ins[0],))
_rule("sin", np.sin, lambda g, ins, out, at: (g * cos(ins[0]),))
_rule("cos", np.cos, lambda g, ins, out, at: (-(g * sin(ins[0])),))
_rule("sqrt", np.sqrt, lambda g, ins, out, at: (g * 0.5 / out,))


def forward(tape: Tape, op: str, inputs: Sequence[int], **attrs) -> int:
    """Apply ``op`` to tape nodes ``inputs``; return the new node id."""
    if op not in _FORWARD:
        raise KeyError(f"unknown operation {op!r}")
    return tape.apply(op, [Var(tape, i) for i in inputs], **attrs).id


# ---------------------------------------------------------------------------
# Array-or-Var functions (the namespace used by models and objectives)
# ---------------------------------------------------------------------------


def _unary(name, npfn):
    def fn(x):
        if isinstance(x, Var):
            return x.tape.apply(name, [x])
        return npfn(x)

    fn.__name__ = name
    return fn


tanh = _unary("tanh", np.tanh)
relu = _unary("relu", lambda a: np.maximum(a, 0.0))
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
sqrt = _unary("sqrt", np.sqrt)


def square(x):
    return x * x


def matmul(a, b):
    return a @ b


def dot(a, b):
    """Inner product of two vectors."""
    if _shape(a) != _shape(b) or len(_shape(a)) != 1:
        raise ShapeError("dot", [_shape(a), _shape(b)])
    return a @ b


def concat(items: Sequence, axis: int = 0):
    tape = next((x.tape for x in items if isinstance(x, Var)), None)
    if tape is None:
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in items], axis=axis)
    vars_ = [x if isinstance(x, Var) else tape.const(x) for x in items]
    return tape.apply("concat", vars_, axis=axis)


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list:
    """Gradients of scalar ``output`` with respect to each of ``wrt``.

    Nodes that ``output`` does not depend on get a zero gradient. With
    ``create_graph`` the results are Vars recorded on the same tape.
    """
    tape = output.tape
    if output.size != 1:
        raise ShapeError("grad", [output.shape], "output must be a scalar")
    wrt_ids = [w.id for w in wrt]
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("grad: wrt variables must live on the output's tape")
    out_id = output.id
    lo = min(wrt_ids) if wrt_ids else out_id
    relevant = set(wrt_ids)
    for i in range(lo, out_id + 1):
        if i not in relevant and any(j in relevant for j in tape.inputs[i]):
            relevant.add(i)

    def zeros_like(node):
        z = np.zeros_like(tape.values[node])
        return tape.const(z) if create_graph else z

    if out_id not in relevant:
        return [zeros_like(i) for i in wrt_ids]

    keep = set(wrt_ids)
    seed = np.ones_like(tape.values[out_id])
    adj: dict = {out_id: tape.const(seed) if create_graph else seed}
    for i in range(out_id, lo - 1, -1):
        g = adj.get(i)
        if g is None or not tape.inputs[i]:
            continue
        if i not in keep:
            del adj[i]
        op = tape.ops[i]
        if create_graph:
            ins = [Var(tape, j) for j in tape.inputs[i]]
            out = Var(tape, i)
        else:
            ins = [tape.values[j] for j in tape.inputs[i]]
            out = tape.values[i]
        grads = _BACKWARD[op](g, ins, out, tape.attrs[i])
        for j, gj in zip(tape.inputs[i], grads):
            if j not in relevant or gj is None:
                continue
            if not create_graph:
                gj = np.asarray(gj)
            prev = adj.get(j)
            adj[j] = gj if prev is None else prev + gj
    return [adj[i] if i in adj else zeros_like(i) for i in wrt_ids]


@dataclass(frozen=True)
class GradRequest:
    """What to differentiate.

    ``order=1``: d output / d node for each node in ``wrt``.
    ``order=2``: first take ``g = d output / d inner`` on the tape, then
    differentiate the scalar component ``g[component]`` with respect to ``wrt``.
    """

    output: int
    wrt: tuple[int, ...]
    order: int = 1
    inner: int | None = None
    component: tuple = ()

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.order == 2 and self.inner is None:
            raise ValueError("order 2 requests need the inner node")


def backward(tape: Tape, req: GradRequest) -> dict[int, np.ndarray]:
    """Evaluate ``req`` on ``tape``; returns node id -> gradient array."""
    out = Var(tape, req.output)
    if out.size != 1:
        raise ShapeError("backward", [out.shape], "output must be a scalar")
    wrt = [Var(tape, i) for i in req.wrt]
    if req.order == 1:
        grads = grad(out, wrt)
    else:
        (g1,) = grad(out, [Var(tape, req.inner)], create_graph=True)
        comp = g1[req.component] if req.component != () else g1
        grads = [value_of(g) for g in grad(comp, wrt)]
    return {i: np.asarray(g) for i, g in zip(req.wrt, grads)}
