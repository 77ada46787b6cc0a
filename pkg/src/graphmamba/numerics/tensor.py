"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a plain function that computes its output
with numpy and, when a :class:`Tape` is active and any input requires a
gradient, appends a record holding a closure for the vector-Jacobian
product.  ``Tape.backward`` replays the records in reverse execution order.

    >>> w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = matmul(w, Tensor([[5.0], [6.0]])).sum()
    >>> tape.backward(y)
    >>> w.grad.tolist()
    [[5.0, 6.0], [5.0, 6.0]]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from graphmamba.errors import DimensionError, NonFiniteError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "graphmamba_tape", default=None
)
_ACTIVE_COUNTER: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "graphmamba_flops", default=None
)

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
        return float(self.data.item())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; all of it routes through the recorded functions below
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
        return mul(self, 1.0 / _as_array(other, self.dtype))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  A tape is owned by a single training step.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[str]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        Returns the op names in the order they were visited, which is the
        reverse of execution order.
        """
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or a seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        touched: dict[int, Tensor] = {id(loss): loss}
        visited = []
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            visited.append(rec.op)
            if g_out is None:
                continue
            rec.output.grad = g_out if rec.output.grad is None else rec.output.grad + g_out
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                touched[key] = inp
                grads[key] = g if key not in grads else grads[key] + g
        # whatever remains belongs to leaves (tensors not produced on this tape)
        for key, g in grads.items():
            leaf = touched[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return visited

    def gradient(self, loss: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of ``loss`` w.r.t. named leaves; zeros where unreached."""
        for t in wrt.values():
            t.grad = None
        self.backward(loss)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in wrt.items()}


class FlopCounter:
    """Counts multiply-add work of matmul, dense and conv2d (2 ops per MAC)."""

    def __init__(self) -> None:
        self.by_op: dict[str, int] = {}
        self._token = None

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, flops: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)

    def __enter__(self) -> "FlopCounter":
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_COUNTER.reset(self._token)


def _count(op: str, flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(op, flops)


def _as_array(x, dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.records.append(_Record(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    return _record(
        "add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    return _record(
        "sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    return _record(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose_last needs rank >= 2, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _record("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, backward)


def index(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _record("index", (a,), np.array(out), backward)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch row gather: ``a`` is batch x T x F, ``indices`` batch x N."""
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim != 3 or indices.ndim != 2 or indices.shape[0] != a.shape[0]:
        raise DimensionError(f"gather_rows: cannot gather {indices.shape} from {a.shape}")
    batch = np.arange(a.shape[0])[:, None]
    out = a.data[batch, indices]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, indices), g)
        return (full,)

    return _record("gather", (a,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _count("matmul", 2 * int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    _count("dense", 2 * x2.shape[0] * w.shape[0] * w.shape[1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record("dense", inputs, out, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation over NHWC input with a k x k x c_in x c_out kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and kkio kernel, got {x.shape}, {kernel.shape}")
    k, k2, c_in, c_out = kernel.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {kernel.shape}")
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match kernel {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    pad = k // 2 if padding == "same" else 0
    n, h, w, _ = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d kernel {k}x{k} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    # windows: n, ho, wo, c_in, k, k -> n, ho, wo, k, k, c_in
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c_in)
    k2d = kernel.data.reshape(k * k * c_in, c_out)
    _count("conv2d", 2 * n * ho * wo * k * k * c_in * c_out)
    out = cols @ k2d
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ k2d.T).reshape(n, ho, wo, k, k, c_in)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + ho, j : j + wo, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, backward)


def scaled(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (kept separate so the tape stays readable)."""
    return mul(x, np.asarray(factor, dtype=x.dtype))
