"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive has a forward rule and a vector-Jacobian rule. The same
forward rule runs whether or not a tape is recording, so a taped evaluation
and a plain numpy evaluation produce bitwise-identical values.

Usage::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = F.inner(x, x)
    (gx,) = tape.backward(y, [x])   # -> [6.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Raised for malformed operations: bad shapes, non-finite inputs, foreign tensors."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, *inputs, **params) -> one cotangent (or None) per input
    vjp: Callable[..., tuple]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(op, f"shape mismatch {a.shape} vs {b.shape}") from None


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _sub_fwd(a, b):
    _check_broadcast("subtract", a, b)
    return a - b


def _mul_fwd(a, b):
    _check_broadcast("multiply", a, b)
    return a * b


def _matvec_fwd(A, x):
    if A.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != A.shape[1]:
        raise AutodiffError("matvec", f"shape mismatch {A.shape} @ {x.shape}")
    return x @ A.T


def _matvec_vjp(g, out, A, x):
    if x.ndim == 1:
        return np.outer(g, x), g @ A
    return g.T @ x, g @ A


def _log_fwd(x):
    if np.any(x <= 0):
        raise AutodiffError("log", "non-positive input")
    return np.log(x)


def _sigmoid_fwd(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lse_fwd(x):
    if x.ndim == 0 or x.shape[-1] == 0:
        raise AutodiffError("log_sum_exp", f"needs a non-empty last axis, got {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _lse_vjp(g, out, x):
    return (np.asarray(g)[..., None] * np.exp(x - np.asarray(out)[..., None]),)


def _inner_fwd(a, b):
    if a.shape != b.shape:
        raise AutodiffError("inner", f"shape mismatch {a.shape} vs {b.shape}")
    return np.asarray(np.sum(a * b))


def _concat_fwd(*xs, axis=0, stack=False):
    try:
        return np.stack(xs, axis=axis) if stack else np.concatenate(xs, axis=axis)
    except ValueError:
        shapes = [x.shape for x in xs]
        raise AutodiffError("concat", f"shape mismatch {shapes}") from None


def _concat_vjp(g, out, *xs, axis=0, stack=False):
    if stack:
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("add", _add_fwd,
                  lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
        Primitive("subtract", _sub_fwd,
                  lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
        Primitive("multiply", _mul_fwd,
                  lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
        Primitive("scale", lambda x, c: x * c, lambda g, out, x, c: (g * c,)),
        Primitive("matvec", _matvec_fwd, _matvec_vjp),
        Primitive("exp", np.exp, lambda g, out, x: (g * out,)),
        Primitive("log", _log_fwd, lambda g, out, x: (g / x,)),
        Primitive("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),)),
        Primitive("sigmoid", _sigmoid_fwd, lambda g, out, x: (g * out * (1.0 - out),)),
        Primitive("log_sum_exp", _lse_fwd, _lse_vjp),
        Primitive("sq_norm", lambda x: np.asarray(np.sum(x * x)), lambda g, out, x: (2.0 * g * x,)),
        Primitive("inner", _inner_fwd, lambda g, out, a, b: (g * b, g * a)),
        Primitive("concat", _concat_fwd, _concat_vjp),
    ]
}


class Var:
    """A value recorded on a tape. Shape is fixed at creation."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __rmatmul__(self, other):
        return matvec(other, self)


@dataclass
class _Node:
    kind: str
    inputs: tuple  # tape indices, None for constants
    args: tuple  # forward input values
    params: dict
    out: np.ndarray
    vjp: Callable[[np.ndarray], tuple] | None = None  # custom rule (checkpoint segments)


@dataclass
class CheckpointStats:
    segments: int
    segment_length: int
    stored_boundaries: int
    peak_recomputed: int = 0

    @property
    def peak_states(self) -> int:
        return self.stored_boundaries + self.peak_recomputed


@dataclass
class Tape:
    """Ordered record of operations; one tape per optimization run, single-threaded."""

    nodes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise AutodiffError("leaf", "non-finite value")
        value.setflags(write=False)
        self.nodes.append(_Node("leaf", (), (), {}, value))
        return Var(value, self, len(self.nodes) - 1)

    def record(self, kind: str, inputs: Sequence, **params) -> Var:
        try:
            prim = PRIMITIVES[kind]
        except KeyError:
            raise AutodiffError(kind, "unsupported primitive") from None
        idx, vals = self._unpack(kind, inputs)
        out = np.asarray(prim.forward(*vals, **params), dtype=np.float64)
        if not np.isfinite(out).all():
            raise AutodiffError(kind, "non-finite output")
        self.nodes.append(_Node(kind, idx, vals, params, out))
        return Var(out, self, len(self.nodes) - 1)

    def record_custom(self, kind: str, inputs: Sequence, out: np.ndarray, vjp) -> Var:
        idx, vals = self._unpack(kind, inputs)
        self.nodes.append(_Node(kind, idx, vals, {}, out, vjp))
        return Var(out, self, len(self.nodes) - 1)

    def _unpack(self, kind: str, inputs: Sequence) -> tuple[tuple, tuple]:
        idx, vals = [], []
        for x in inputs:
            if isinstance(x, Var):
                # recorded values were checked when produced
                if x.tape is not self:
                    raise AutodiffError(kind, "input belongs to a different tape")
                idx.append(x.index)
                vals.append(x.value)
            else:
                v = np.asarray(x, dtype=np.float64)
                if not np.isfinite(v).all():
                    raise AutodiffError(kind, "non-finite input")
                idx.append(None)
                vals.append(v)
        return tuple(idx), tuple(vals)

    def backward(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each leaf in ``wrt``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise AutodiffError("backward", "loss is not on this tape")
        if loss.value.shape != ():
            raise AutodiffError("backward", f"loss must be scalar, got shape {loss.value.shape}")
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self or self.nodes[w.index].kind != "leaf":
                raise AutodiffError("backward", "wrt tensor is not a leaf of this tape")
        return self.pullback(loss, np.ones(()), wrt)

    def pullback(self, out: Var, seed: np.ndarray, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Vector-Jacobian product: pull cotangent ``seed`` on ``out`` back to ``wrt``."""
        grads: dict[int, np.ndarray] = {out.index: np.asarray(seed, dtype=np.float64)}
        for i in range(out.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.kind == "leaf":
                continue
            if node.vjp is not None:
                cots = node.vjp(g)
            else:
                cots = PRIMITIVES[node.kind].vjp(g, node.out, *node.args, **node.params)
            for j, c in zip(node.inputs, cots):
                if j is None or c is None:
                    continue
                prev = grads.get(j)
                grads[j] = c if prev is None else prev + c
        return [np.array(grads.get(w.index, np.zeros(w.shape)), dtype=np.float64) for w in wrt]


def _tape_of(inputs: Sequence) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise AutodiffError("record", "inputs span multiple tapes")
    return tape


def apply(kind: str, *inputs, **params):
    """Record on the inputs' tape if any input is a Var, else evaluate directly."""
    tape = _tape_of(inputs)
    if tape is not None:
        return tape.record(kind, inputs, **params)
    vals = [np.asarray(x, dtype=np.float64) for x in inputs]
    for v in vals:
        if not np.isfinite(v).all():
            raise AutodiffError(kind, "non-finite input")
    return np.asarray(PRIMITIVES[kind].forward(*vals, **params), dtype=np.float64)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b):
    return apply("add", a, b)


def subtract(a, b):
    return apply("subtract", a, b)


def multiply(a, b):
    return apply("multiply", a, b)


def scale(x, c: float):
    return apply("scale", x, c=float(c))


def matvec(A, x):
    return apply("matvec", A, x)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def tanh(x):
    return apply("tanh", x)


def sigmoid(x):
    return apply("sigmoid", x)


def log_sum_exp(x):
    """Stabilized log-sum-exp over the last axis."""
    return apply("log_sum_exp", x)


def sq_norm(x):
    return apply("sq_norm", x)


def inner(a, b):
    return apply("inner", a, b)


def concat(xs: Sequence, axis: int = 0, stack: bool = False):
    return apply("concat", *xs, axis=axis, stack=stack)


def softplus(x):
    # log(1 + e^x) as a log-sum-exp over the pair (0, x)
    return log_sum_exp(concat([np.zeros(value(x).shape), x], axis=-1, stack=True))


def with_checkpointing(segment_length: int, steps: Sequence[Callable], x):
    """Chain ``steps`` from ``x`` storing only segment-boundary states.

    Backward recomputes each segment on a scratch tape, so peak storage is
    the boundary count plus one segment. Values and gradients match the
    plain chained computation to round-off.
    """
    if segment_length < 1:
        raise AutodiffError("checkpoint", f"segment_length must be >= 1, got {segment_length}")
    n = len(steps)
    x_val = value(x)
    boundaries = []
    for start in range(0, n, segment_length):
        boundaries.append(x_val)
        for fn in steps[start:start + segment_length]:
            x_val = value(fn(x_val))
    if not isinstance(x, Var):
        return x_val

    stats = CheckpointStats(len(boundaries), segment_length, len(boundaries))
    x.tape.checkpoints.append(stats)

    def vjp(g):
        for s in range(len(boundaries) - 1, -1, -1):
            seg = steps[s * segment_length:(s + 1) * segment_length]
            local = Tape()
            h = local.leaf(boundaries[s])
            out = h
            for fn in seg:
                out = fn(out)
            stats.peak_recomputed = max(stats.peak_recomputed, len(seg))
            (g,) = local.pullback(out, g, [h])
        return (g,)

    return x.tape.record_custom("checkpoint", [x], x_val, vjp)

