"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`.  When any input requires a gradient
the result remembers its parents and a local adjoint rule; :func:`grad`
replays those rules in reverse creation order.  Creation order is a valid
topological order, so the set of recorded nodes behaves as an append-only
tape without a separate global object.

Broadcasting is deliberately narrow: elementwise ops need identical shapes,
``add_bias`` adds a vector along the last axis, and ``matmul`` accepts either
identical leading batch dims or a 2-D right operand applied over the last axis.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "UsageError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "debug_enabled",
    "grad",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "embedding",
    "masked_fill",
    "softmax_rows",
    "rms_norm",
    "silu",
    "dropout",
    "cross_entropy",
    "sum_all",
    "mean_all",
    "detach",
]

RMS_EPS = 1e-5


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_counter = itertools.count()
_grad_enabled = True
_debug = True


def set_debug(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every op."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_rows(self, idx)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False, name=x.name)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one graph: {dt} vs {t.dtype}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    _same_dtype(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    _same_dtype(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (last axis)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last dim of {x.shape}")
    _same_dtype(x, b)
    n = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _result(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the constant boolean ``mask`` is True."""
    mask = np.broadcast_to(mask, x.shape)
    keep = ~mask
    return _result(np.where(mask, x.dtype.type(value), x.data), (x,), lambda g: (g * keep,), "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def _rows_matmul(ad: np.ndarray, bd: np.ndarray) -> np.ndarray:
    """``ad @ bd`` with single-row operands padded to two rows.

    BLAS takes a matrix-vector path for one row and rounds differently from
    the matrix-matrix path, so a row's result would depend on how many rows
    were computed with it.  Padding keeps every row on the same kernel.
    """
    if ad.shape[-2] != 1:
        return ad @ bd
    return (np.concatenate([ad, ad], axis=-2) @ bd)[..., :1, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (applied to every row of ``a``) or has exactly the
    same leading batch dims as ``a``.
    """
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k = a.shape[-1]

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(_rows_matmul(ad, bd), (a, b), back, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def back_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(_rows_matmul(ad, bd), (a, b), back_batched, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of nothing")
    if len(tensors) == 1:
        return tensors[0]
    _same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take_rows(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing with a scatter adjoint."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), back, "index")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range [0, {v})")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back, "embedding")


# ---------------------------------------------------------------------------
# normalisation and probabilities
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a last dimension of size >= 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # sequential sum: appending masked (zero) entries leaves row sums bit-identical
    y = e / np.cumsum(e, axis=-1)[..., -1:]

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax_rows")


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + 1e-5)`` along the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain {gain.shape} vs feature dim {d}")
    _same_dtype(x, gain)
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + x.dtype.type(RMS_EPS))
    xhat = xd * inv

    def back(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gh = g * gd
        gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain

    return _result(xhat * gd, (x, gain), back, "rms_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape} targets")
    if n == 0:
        raise UsageError("cross_entropy over zero positions")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    loss = np.maximum(nll, 0.0).mean(dtype=ld.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=ld.dtype), (logits,), back, "cross_entropy")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean"
    )


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def grad(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors.

    With ``leaves`` given, every listed leaf gets an entry (zeros if the
    graph never touches it).  Otherwise all reachable ``requires_grad``
    leaves are returned.
    """
    if loss.data.size != 1:
        raise UsageError(f"grad needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        leaves = list(leaves)
    if not loss.requires_grad:
        if leaves is None:
            raise UsageError("loss is detached from any graph")
        return {leaf: np.zeros_like(leaf.data) for leaf in leaves}

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found: dict[Tensor, np.ndarray] = {}
    for t in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            found[t] = g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp

    if leaves is None:
        return found
    return {leaf: found[leaf] if leaf in found else np.zeros_like(leaf.data) for leaf in leaves}
