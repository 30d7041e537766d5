"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays of rank <= 3. Operations record
themselves on the active :class:`Tape` only when one of their inputs
requires a gradient, so inference outside a tape is allocation-light and
safe to run concurrently.

A :class:`FlopCounter` can be activated alongside (or without) a tape to
count floating point work per named site:

* matrix products count one FLOP per multiply-accumulate;
* elementwise binary ops, ``relu`` and ``exp`` count one per output entry,
  ``softmax`` two per entry (exponent and normalisation) and reductions one
  per input entry; these are only counted inside scopes opened with
  ``elementwise=True``.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
MAX_RANK = 3


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        t.data = _freeze(arr)
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


# --------------------------------------------------------------------------- #
# Tape
# --------------------------------------------------------------------------- #

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("varikit_tape", default=None)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is a
    valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    tracked = tuple(t for t in inputs if isinstance(t, Tensor))
    if not any(t.requires_grad for t in tracked):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Gradients are assigned, not accumulated, so each call reflects exactly
    one loss. Tensors with ``requires_grad=False`` never receive a gradient.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                touched[key] = inp
    # whatever remains are leaves (parameters / inputs)
    for key, g in grads.items():
        t = touched[key]
        t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)


# --------------------------------------------------------------------------- #
# FLOP instrumentation
# --------------------------------------------------------------------------- #

class FlopCounter:
    """Per-run accumulator of FLOPs keyed by site label."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self._scope: list[tuple[str, bool]] = []
        self._token = None

    def __enter__(self) -> "FlopCounter":
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_COUNTER.reset(self._token)
        self._token = None

    @contextlib.contextmanager
    def scope(self, label: str, elementwise: bool) -> Iterator[None]:
        self._scope.append((label, elementwise))
        try:
            yield
        finally:
            self._scope.pop()

    def _add(self, flops: int, elementwise: bool) -> None:
        if self._scope:
            label, count_elementwise = self._scope[-1]
        else:
            label, count_elementwise = "other", False
        if elementwise and not count_elementwise:
            return
        self.counts[label] += int(flops)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


_ACTIVE_COUNTER: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "varikit_flops", default=None
)


@contextlib.contextmanager
def flop_scope(label: str, elementwise: bool = False) -> Iterator[None]:
    """Attribute FLOPs inside the block to ``label`` if a counter is active."""
    counter = _ACTIVE_COUNTER.get()
    if counter is None:
        yield
        return
    with counter.scope(label, elementwise):
        yield


def _count(flops: int, elementwise: bool = True) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter._add(flops, elementwise)


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._wrap(a.data + b.data)
    _count(out.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._wrap(a.data - b.data)
    _count(out.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._wrap(a.data * b.data)
    _count(out.size)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = Tensor._wrap(a.data / b.data)
    _count(out.size)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry one leading batch axis; ``b`` is either a matrix shared
    across the batch or a batch of matrices with the same leading extent.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data))
    batch = a.shape[0] if a.ndim == 3 else 1
    _count(batch * a.shape[-2] * a.shape[-1] * b.shape[-1], elementwise=False)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim == 3:
            p, q = b.shape
            gb = a.data.reshape(-1, p).T @ g.reshape(-1, q)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = Tensor._wrap(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor._wrap(np.where(mask, x.data, np.zeros((), dtype=x.dtype)))
    _count(out.size)
    return _record(out, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.exp(x.data))
    _count(out.size)
    return _record(out, (x,), lambda g: (g * out.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis: shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)
    _count(2 * out.size)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor._wrap(y)
    p = np.exp(y)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)))
    _count(x.size)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = Tensor._wrap(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)))
    _count(x.size)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _record(out, (x,), vjp)


def getitem(x: Tensor, idx) -> Tensor:
    out = Tensor._wrap(np.array(x.data[idx]))

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), vjp)


def pad_axis(x: Tensor, axis: int, amount: int) -> Tensor:
    """Append ``amount`` zero slices to the end of ``axis``."""
    if amount == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[axis] = (0, amount)
    out = Tensor._wrap(np.pad(x.data, width))
    n = x.shape[axis]

    def vjp(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(0, n)
        return (g[tuple(sl)],)

    return _record(out, (x,), vjp)


def repeat(x: Tensor, k: int, axis: int) -> Tensor:
    """Repeat every slice along ``axis`` ``k`` times (data movement only)."""
    out = Tensor._wrap(np.repeat(x.data, k, axis=axis))

    def vjp(g):
        shape = list(x.shape)
        shape.insert(axis + 1 if axis >= 0 else axis % x.ndim + 1, k)
        return (g.reshape(shape).sum(axis=(axis % x.ndim) + 1),)

    return _record(out, (x,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor._wrap(table.data[ids])

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record(out, (table,), vjp)


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-only root-mean-square normalisation over the last axis."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * r
    out = Tensor._wrap(xhat * scale.data)

    def vjp(g):
        gs = _unbroadcast(g * xhat, scale.shape)
        gx_hat = g * scale.data
        gx = r * (gx_hat - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gs

    return _record(out, (x, scale), vjp)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, n, d) -> (B * heads, n, d / heads)."""
    b, n, d = x.shape
    dh = d // n_heads
    out = Tensor._wrap(
        np.ascontiguousarray(x.data.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)).reshape(b * n_heads, n, dh)
    )

    def vjp(g):
        return (g.reshape(b, n_heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d),)

    return _record(out, (x,), vjp)


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B * heads, n, dh) -> (B, n, heads * dh)."""
    bh, n, dh = x.shape
    b = bh // n_heads
    out = Tensor._wrap(
        np.ascontiguousarray(x.data.reshape(b, n_heads, n, dh).transpose(0, 2, 1, 3)).reshape(b, n, n_heads * dh)
    )

    def vjp(g):
        return (g.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh),)

    return _record(out, (x,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over the rows of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.size:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows vs {targets.size} targets")
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    rows = np.arange(targets.size)
    nll = -np.log(p[rows, targets])
    out = Tensor._wrap(np.asarray(nll.mean(), dtype=logits.dtype))

    def vjp(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return ((g * d / targets.size).reshape(logits.shape),)

    return _record(out, (logits,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    diff = sub(a, b)
    return mean(mul(diff, diff))
