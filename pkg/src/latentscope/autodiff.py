"""Dense tensors with reverse-mode automatic differentiation.

The graph is define-by-run: while a :class:`Tape` is active, every primitive
that touches a gradient-requiring tensor appends a node to the tape, and
``tape.backward(loss)`` replays the nodes in reverse creation order (a valid
reverse topological order) exactly once, accumulating gradients additively
into the leaves.  Without an active tape the same primitives run graph-free,
which is what inference paths use.

Float32 is the working precision for training; tests run the same code in
float64 for finite-difference headroom.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "set_nan_guard",
    "matmul",
    "conv2d",
    "conv2d_transpose",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "clip",
    "softmax",
    "logsumexp",
    "concat",
    "narrow",
]

_STATE = threading.local()

# Forward outputs are scanned for NaN/inf by default; NaN propagation is a
# bug, not a value.  Disable only for profiling.
_NAN_GUARD = True


def set_nan_guard(enabled: bool) -> None:
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


def _tape() -> Optional["Tape"]:
    return getattr(_STATE, "tape", None)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not _NAN_GUARD or arr.size == 0:
        return
    # min/max propagate NaN and expose inf without allocating a mask array
    if not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- operator sugar ----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return _reduce(self, axis, mean=False)

    def mean(self, axis=None):
        return _reduce(self, axis, mean=True)

    def reshape(self, *shape):
        return reshape(self, *shape)


class Tape:
    """Execution record for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss.  A tape is confined to the thread
    that created it.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _tape() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def _record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> None:
        out._parents = tuple(parents)
        out._vjp = vjp
        self._nodes.append(out)
        for p in parents:
            if p.requires_grad and p._vjp is None and id(p) not in self._leaf_ids:
                self._leaf_ids.add(id(p))
                self._leaves.append(p)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every gradient-requiring leaf seen.

        Leaves the loss does not depend on map to zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward: loss must be scalar, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        out: dict[Tensor, np.ndarray] = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.broadcast_to(g, leaf.data.shape).astype(leaf.data.dtype, copy=False)
            out[leaf] = g
        return out


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = ()
    out._vjp = None
    out._op = op
    tape = _tape()
    if tape is not None and out.requires_grad:
        tape._record(out, parents, vjp)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data
    return _result(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data
    return _result(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data
    return _result(
        "mul", out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data
    return _result(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    raise TypeError("at least one operand must be a Tensor")


# -- matrix product ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.shape} x {b.shape} (expects 2-D with inner dims equal)"
        )
    out = a.data @ b.data
    return _result(
        "matmul", out, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# -- convolution -------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold (B,C,H,W) into (B, C*kh*kw, OH*OW) patch columns."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, b: int, c: int, h: int, w: int,
            kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add (B, C*kh*kw, OH*OW) columns back onto a (B,C,H,W) canvas."""
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    img = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        img = img[:, :, padding:padding + h, padding:padding + w]
    return img


def conv2d(x: Tensor, w: Tensor, stride: int = 2, padding: int = 0) -> Tensor:
    """Cross-correlate (B,Cin,H,W) with kernels (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: incompatible shapes input {x.shape}, kernel {w.shape}"
        )
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {w.shape} larger than padded input {x.shape}"
        )
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols).reshape(b, cout, oh, ow)

    def vjp(g):
        g2 = g.reshape(b, cout, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, g2)
        dx = _col2im(dcols, b, cin, h, wd, kh, kw, stride, padding)
        return dx, dw

    return _result("conv2d", out, (x, w), vjp)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution; kernels are (Cin,Cout,kh,kw).

    Output spatial size is ``(in - 1) * stride - 2 * padding + k``, the exact
    adjoint of :func:`conv2d` with the same stride/padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv2d_transpose: incompatible shapes input {x.shape}, kernel {w.shape}"
        )
    b, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d_transpose: non-positive output size for input {x.shape}, kernel {w.shape}"
        )
    x2 = x.data.reshape(b, cin, h * wd)
    w2 = w.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(w2.T, x2)  # (B, Cout*kh*kw, H*W)
    out = _col2im(cols, b, cout, oh, ow, kh, kw, stride, padding)

    def vjp(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        # goh == h, gow == wd by construction
        dx = np.matmul(w2, gcols).reshape(x.shape)
        dw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        return dx, dw

    return _result("conv2d_transpose", out, (x, w), vjp)


# -- nonlinearities ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result("relu", out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return _result("log", out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior only."""
    out = np.clip(x.data, lo, hi)
    return _result(
        "clip", out, (x,),
        lambda g: (g * ((x.data >= lo) & (x.data <= hi)),),
    )


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _result("softmax", out, (x,), vjp)


def logsumexp(x: Tensor) -> Tensor:
    """log-sum-exp over the last axis (axis is dropped from the result)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)

    def vjp(g):
        return (np.expand_dims(g, -1) * (e / s),)

    return _result("logsumexp", out, (x,), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Transpose a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {x.shape}")
    return _result("transpose", x.data.T, (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _result("narrow", out, (x,), vjp)


def _reduce(x: Tensor, axis, mean: bool) -> Tensor:
    if axis is None:
        n = x.data.size
        out = x.data.mean() if mean else x.data.sum()
        out = np.asarray(out)

        def vjp(g):
            scale = g / n if mean else g
            return (np.broadcast_to(scale, x.shape),)
    else:
        n = x.shape[axis]
        out = x.data.mean(axis=axis) if mean else x.data.sum(axis=axis)

        def vjp(g):
            scale = g / n if mean else g
            return (np.broadcast_to(np.expand_dims(scale, axis), x.shape),)

    return _result("mean" if mean else "sum", out, (x,), vjp)
