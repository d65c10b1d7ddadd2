"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

The engine is deliberately small: scalars, vectors and 2-D matrices cover
everything the fading architecture needs. Elementwise broadcasting is
restricted to scalar-vs-tensor and equal shapes; anything richer must be
done explicitly (tile with a matmul, or use the fused ``linear`` op).

Values are treated as immutable once an operation has consumed them: the
backward closures capture the forward arrays, so callers that mutate
parameters (optimizers) must reassign ``tensor.values`` rather than write
into the old array.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lapack

from .errors import ContractError, DimensionError, DomainError, NumericError

Array = np.ndarray


def _asarray(values) -> Array:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A dense float64 array, optionally attached to a gradient tape.

    Tensors not attached to any tape act as constants: operations on them
    compute values without recording anything.
    """

    __slots__ = ("values", "tape", "node_id", "grad")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = _asarray(values)
        self.tape = tape
        self.node_id = node_id
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in execution order, so parents always precede
    children and ``backward`` is a single reverse sweep. The tape never
    mutates tensor values: two backward calls over the same recording give
    bit-identical gradients.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple[Callable[[Array], Array], ...]] = []
        self._watched: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._parents)

    def _append(self, parents: tuple[int, ...], vjps: tuple) -> int:
        self._parents.append(parents)
        self._vjps.append(vjps)
        return len(self._parents) - 1

    def watch(self, tensor: Tensor) -> Tensor:
        """Register ``tensor`` as a leaf on this tape.

        Re-watching a tensor that already lives on this tape is a no-op;
        a tensor carried over from an older tape is re-registered here.
        """
        if tensor.tape is self and tensor.node_id is not None:
            return tensor
        tensor.tape = self
        tensor.node_id = self._append((), ())
        self._watched.append(tensor)
        return tensor

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Reverse sweep from a scalar ``loss`` down the tape.

        Returns a map node-id -> gradient array covering every node that
        receives a gradient; watched leaves always appear (zeros when the
        loss does not reach them) and additionally get their gradient
        mirrored onto ``leaf.grad``.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss tensor is not recorded on this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[Array | None] = [None] * len(self)
        grads[loss.node_id] = np.ones_like(loss.values)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for pid, vjp in zip(self._parents[nid], self._vjps[nid]):
                contrib = vjp(g)
                prev = grads[pid]
                grads[pid] = contrib if prev is None else prev + contrib
        out: dict[int, Array] = {n: g for n, g in enumerate(grads) if g is not None}
        for leaf in self._watched:
            if leaf.node_id not in out:
                out[leaf.node_id] = np.zeros_like(leaf.values)
            leaf.grad = out[leaf.node_id]
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operation mixes tensors from two different tapes")
    return tape


def _result(values: Array, links: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    tape = _find_tape([t for t, _ in links])
    if tape is None:
        return Tensor(values)
    parents = []
    vjps = []
    for t, vjp in links:
        if t.tape is tape and t.node_id is not None:
            parents.append(t.node_id)
            vjps.append(vjp)
    return Tensor(values, tape, tape._append(tuple(parents), tuple(vjps)))


# ---------------------------------------------------------------------------
# elementwise binary ops (scalar or equal-shape broadcasting only)
# ---------------------------------------------------------------------------

def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand side


def _binary(name: str, a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not (a.shape == b.shape or a.size == 1 or b.size == 1):
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable"
        )
    av, bv = a.values, b.values
    out = fwd(av, bv)
    return _result(out, [
        (a, lambda g: _reduce_to(da(g, av, bv), av.shape)),
        (b, lambda g: _reduce_to(db(g, av, bv), bv.shape)),
    ])


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def _unary(t, out: Array, dfn: Callable[[Array], Array]) -> Tensor:
    t = as_tensor(t)
    return _result(out, [(t, dfn)])


def tanh(t) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.values)
    return _unary(t, y, lambda g: g * (1.0 - y * y))


def relu(t) -> Tensor:
    t = as_tensor(t)
    x = t.values
    return _unary(t, np.maximum(x, 0.0), lambda g: g * (x > 0.0))


def elu(t) -> Tensor:
    """Exponential linear unit with unit negative-branch scale."""
    t = as_tensor(t)
    x = t.values
    y = np.where(x > 0.0, x, np.expm1(x))
    return _unary(t, y, lambda g: g * np.where(x > 0.0, 1.0, y + 1.0))


def _sigmoid_values(x: Array) -> Array:
    # clip keeps exp() finite; saturated outputs have zero derivative anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -709.0, 709.0)))


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    y = _sigmoid_values(t.values)
    return _unary(t, y, lambda g: g * y * (1.0 - y))


def softplus(t) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the logistic."""
    t = as_tensor(t)
    x = t.values
    return _unary(t, np.logaddexp(0.0, x), lambda g: g * _sigmoid_values(x))


def exp(t) -> Tensor:
    t = as_tensor(t)
    y = np.exp(t.values)
    return _unary(t, y, lambda g: g * y)


def log(t) -> Tensor:
    t = as_tensor(t)
    x = t.values
    if np.any(x <= 0.0):
        raise DomainError(f"log of non-positive value (min entry {x.min():g})")
    return _unary(t, np.log(x), lambda g: g / x)


def square(t) -> Tensor:
    t = as_tensor(t)
    x = t.values
    return _unary(t, x * x, lambda g: g * (2.0 * x))


#: op-tag dispatch table; activations for block bodies are looked up here.
ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
}

ACTIVATIONS = ("tanh", "relu", "elu", "sigmoid")


def elementwise(tag: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op-tag {tag!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not (-t.ndim <= axis < t.ndim):
        raise DimensionError(f"axis {axis} invalid for shape {t.shape}")


def _spread(g: Array, shape: tuple[int, ...], axis: int | None, keepdims: bool) -> Array:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(t, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    out = np.sum(t.values, axis=axis, keepdims=keepdims)
    shape = t.values.shape
    return _result(np.asarray(out), [(t, lambda g: _spread(g, shape, axis, keepdims))])


def tensor_mean(t, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    out = np.mean(t.values, axis=axis, keepdims=keepdims)
    shape = t.values.shape
    n = t.size if axis is None else shape[axis]
    return _result(np.asarray(out), [(t, lambda g: _spread(g, shape, axis, keepdims) / n)])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _result(av @ bv, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got shape {t.shape}")
    return _result(t.values.T, [(t, lambda g: g.T)])


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    old = t.values.shape
    return _result(np.reshape(t.values, shape), [(t, lambda g: g.reshape(old))])


def concat_cols(tensors: Sequence) -> Tensor:
    """Column-concatenate 2-D tensors with a common row count."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_cols needs at least one tensor")
    rows = ts[0].shape[0]
    for t in ts:
        if t.ndim != 2 or t.shape[0] != rows:
            raise DimensionError(
                f"concat_cols needs 2-D tensors with {rows} rows, got shape {t.shape}"
            )
    out = np.concatenate([t.values for t in ts], axis=1)
    links = []
    start = 0
    for t in ts:
        stop = start + t.shape[1]
        links.append((t, (lambda s0, s1: lambda g: g[:, s0:s1])(start, stop)))
        start = stop
    return _result(out, links)


def linear(x, w, b) -> Tensor:
    """Fused affine map ``x @ w.T + b`` for one network layer.

    x: (batch, fan_in); w: (fan_out, fan_in); b: (fan_out,). Backward:
    gx = g @ w, gw = g.T @ x, gb = column sums of g.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"linear expects (batch,in),(out,in),(out,), got {x.shape},{w.shape},{b.shape}"
        )
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise DimensionError(
            f"linear dimensions do not chain: {x.shape} x {w.shape} + {b.shape}"
        )
    xv, wv = x.values, w.values
    out = xv @ wv.T + b.values
    return _result(out, [
        (x, lambda g: g @ wv),
        (w, lambda g: g.T @ xv),
        (b, lambda g: g.sum(axis=0)),
    ])


def logdet_spd(m) -> Tensor:
    """Log-determinant of a symmetric positive-definite matrix.

    Forward runs a Cholesky factorization; backward uses the symmetrized
    inverse. Intended for the small capacity matrices (k = block count),
    never for anything dataset-sized.
    """
    m = as_tensor(m)
    v = m.values
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise DimensionError(f"logdet_spd needs a square matrix, got shape {v.shape}")
    asym = float(np.max(np.abs(v - v.T))) if v.size else 0.0
    if asym > 1e-9:
        raise ContractError(f"logdet_spd needs a symmetric matrix (max asymmetry {asym:.3e})")
    c, info = lapack.dpotrf(v, lower=1, clean=0)
    if info > 0:
        raise NumericError(
            f"cholesky factorization failed: leading minor of order {info} "
            f"is not positive definite (pivot index {info - 1})",
            pivot=info - 1,
        )
    if info < 0:
        raise NumericError(f"cholesky: illegal value in argument {-info}")
    val = 2.0 * np.sum(np.log(np.diagonal(c)))

    def vjp(g: Array) -> Array:
        inv, info2 = lapack.dpotri(c, lower=1)
        if info2 != 0:
            raise NumericError(f"triangular inversion failed with info={info2}")
        full = np.tril(inv) + np.tril(inv, -1).T
        return float(g) * full

    return _result(np.asarray(val), [(m, vjp)])
