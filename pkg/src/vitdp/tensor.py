"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs are being tracked.
``backward`` walks the records in reverse recording order, visiting each one
once, and leaves a gradient on every watched leaf.

Tensors keep the dtype they were created with: ``float32`` for training,
``float64`` for gradient checks.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import DimensionError, InputError, NonFiniteError, UsageError

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@numba.njit(cache=True, nogil=True)
def _bmm_kernel(a, b, out):
    # out[t, i, j] accumulates a[t, i, k] * b[t, k, j] for k = 0, 1, ... in order
    nb, m, kk = a.shape
    n = b.shape[2]
    for t in range(nb):
        for i in range(m):
            for j in range(n):
                out[t, i, j] = 0
            for k in range(kk):
                x = a[t, i, k]
                for j in range(n):
                    out[t, i, j] += x * b[t, k, j]
    return out


def matmul_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with a fixed summation order.

    Leading axes must match exactly. Each output element is accumulated
    left to right over the inner dimension, so the result is bit-identical
    to a naive triple loop in the same precision.
    """
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul needs equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    a3 = np.ascontiguousarray(a, dtype=dtype).reshape(-1, m, k)
    b3 = np.ascontiguousarray(b, dtype=dtype).reshape(-1, k, n)
    out = np.empty((a3.shape[0], m, n), dtype=dtype)
    _bmm_kernel(a3, b3, out)
    return out.reshape(*lead, m, n)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray, tuple], tuple]


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple  # node id per input, None where the input is untracked
    output: int
    backward: BackwardFn


_local = threading.local()


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded when
    at least one input is tracked by this tape. Tapes are thread-local, so
    ranks simulated as threads each keep their own.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.leaves: dict[int, Tensor] = {}
        self._next = 0

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _new_id(self) -> int:
        nid = self._next
        self._next += 1
        return nid

    def watch(self, t: Tensor | np.ndarray) -> Tensor:
        """Register ``t`` as a leaf whose gradient will be reported."""
        if not isinstance(t, Tensor):
            t = Tensor(t)
        t._tape = self
        t._node = self._new_id()
        t.grad = None
        self.leaves[t._node] = t
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
        ids = tuple(x._node if x._tape is self else None for x in inputs)
        out = Tensor(data)
        out._tape = self
        out._node = self._new_id()
        self.records.append(TapeRecord(kind, ids, out._node, backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{leaf node id: gradient}`` for every watched leaf and also sets
    ``leaf.grad``. Leaves with no path to the loss get zeros.
    """
    if loss._tape is not tape:
        raise UsageError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        needs = tuple(i is not None for i in rec.inputs)
        in_grads = rec.backward(g, needs)
        for nid, ig in zip(rec.inputs, in_grads):
            if nid is None or ig is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + ig
            else:
                grads[nid] = ig
    out = {}
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        out[nid] = g
    return out


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "_tape", "_node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self._node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], bwd: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    tape = current_tape()
    if tape is None or not any(x._tape is tape and x._node is not None for x in inputs):
        return Tensor(data)
    return tape.record(kind, inputs, data, bwd)


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = matmul_arrays(a.data, b.data)

    def bwd(g, needs):
        ga = matmul_arrays(g, _swap_last(b.data)) if needs[0] else None
        gb = matmul_arrays(_swap_last(a.data), g) if needs[1] else None
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes differ {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return _emit("add", a.data + a.dtype.type(b), (a,), lambda g, needs: (g,))
    b = as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return _emit("sub", a.data - a.dtype.type(b), (a,), lambda g, needs: (g,))
    b = as_tensor(b)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, needs: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same("mul", a, b)

    def bwd(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(s)
    return _emit("scale", a.data * s, (a,), lambda g, needs: (g * s,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b) -> Tensor:
    if kind == "scale":
        if not np.isscalar(b):
            raise InputError("scale takes a scalar factor")
        return scale(a, b)
    try:
        return _ELEMENTWISE[kind](a, b)
    except KeyError:
        raise InputError(f"unknown elementwise op {kind!r}") from None


def add_trailing(x, b) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x`` (bias, positions)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_trailing: {b.shape} does not match the tail of {x.shape}")

    def bwd(g, needs):
        gb = g.reshape(-1, *b.shape).sum(axis=0) if needs[1] else None
        return g, gb

    return _emit("add_trailing", x.data + b.data, (x, b), bwd)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(src),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g, needs: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, bwd)


def take(x, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` and drop that axis."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def bwd(g, needs):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit("take", out, (x,), bwd)


def expand_leading(x, n: int) -> Tensor:
    """Repeat ``x`` ``n`` times along a new leading axis."""
    x = as_tensor(x)
    out = np.broadcast_to(x.data, (n, *x.shape)).copy()
    return _emit("expand_leading", out, (x,), lambda g, needs: (g.sum(axis=0),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g, needs: (np.full_like(x.data, g),))


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted so large inputs stay finite."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bwd(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), bwd)


def _gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    out = _gelu_value(x.data).astype(x.dtype, copy=False)
    return _emit("gelu", out, (x,), lambda g, needs: (g * _gelu_derivative(x.data).astype(x.dtype, copy=False),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, c = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise InputError(f"{y.shape[0]} labels for a batch of {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, y].sum() / b, dtype=logits.dtype)

    def bwd(g, needs):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / b),)

    return _emit("cross_entropy", loss, (logits,), bwd)
