"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is a flat gradient tape: every differentiable operation appends
one entry holding the output, its inputs, and per-input vector-Jacobian
callbacks. Replaying the tape in reverse accumulates exact adjoints of the
recorded forward composition. Only the operations needed by the rest of
this package are provided; broadcasting is limited to equal-rank shapes
with singleton extents (plus python scalars).

Forward evaluation without an active tape records nothing, so inference is
safe to run concurrently on independent inputs. Each thread sees its own
active tape.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "backward",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "matmul",
    "conv2d",
    "read_stif",
    "write_stif",
]

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        if getattr(_state, "tape", None) is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def record(self, out: "Tensor", inputs: Sequence[tuple["Tensor", Callable]]):
        """Append one op: ``inputs`` pairs each input tensor with a vjp.

        A vjp maps the gradient w.r.t. ``out`` (ndarray) to the gradient
        contribution w.r.t. that input (ndarray of the input's shape).
        """
        self._entries.append((out, [(t, f) for t, f in inputs if t.requires_grad]))

    def backward(self, loss: "Tensor"):
        """Populate ``.grad`` of every requires_grad tensor reachable from loss.

        Gradients accumulate (+=) into existing ``.grad`` buffers; zeroing is
        the caller's responsibility. The tape is consumed afterwards.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        pending = {id(loss): np.ones_like(loss.data)}
        for out, inputs in reversed(self._entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, vjp in inputs:
                contrib = vjp(g)
                key = id(t)
                if key in pending:
                    pending[key] += contrib
                else:
                    pending[key] = contrib.astype(np.float32, copy=True)
            if out.requires_grad:
                out._accumulate_grad(g)
        for out, inputs in self._entries:
            for t, _ in inputs:
                g = pending.get(id(t))
                if g is not None:
                    t._accumulate_grad(g)
                    pending.pop(id(t))
        if id(loss) in pending and loss.requires_grad:
            loss._accumulate_grad(pending.pop(id(loss)))
        self._entries.clear()


def tape() -> Tape:
    """Start recording; use as ``with tape() as tp: ...; tp.backward(loss)``."""
    return Tape()


class no_grad:
    """Context manager suspending tape recording in this thread."""

    def __enter__(self):
        self._saved = getattr(_state, "tape", None)
        _state.tape = None
        return self

    def __exit__(self, *exc):
        _state.tape = self._saved
        return False


def backward(loss: "Tensor"):
    """Run the active tape's backward pass from a scalar loss."""
    tp = _active_tape()
    if tp is None:
        raise RuntimeError("backward() requires an active tape")
    tp.backward(loss)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float32)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A contiguous float32 array plus optional gradient buffer.

    The ``data`` buffer is treated as immutable by every operation; only the
    optimizer's designated in-place update (and ``zero_grad``) mutate state.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def _accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda a, b, g: g, lambda a, b, g: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda a, b, g: g, lambda a, b, g: -g)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        return _binary(
            self, other, np.multiply, lambda a, b, g: g * b, lambda a, b, g: g * a
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self,
            other,
            np.divide,
            lambda a, b, g: g / b,
            lambda a, b, g: -g * a / (b * b),
        )

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda a, y, g: -g)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def vjp(g, idx=idx, shape=self.data.shape):
            full = np.zeros(shape, dtype=np.float32)
            full[idx] = g
            return full

        return _make_op(out_data, [(self, vjp)])

    # -- unary math ------------------------------------------------------

    def exp(self):
        return _unary(self, np.exp, lambda a, y, g: g * y)

    def sqrt(self):
        return _unary(self, np.sqrt, lambda a, y, g: g * 0.5 / y)

    def abs(self):
        return _unary(self, np.abs, lambda a, y, g: g * np.sign(a))

    def sin(self):
        return _unary(self, np.sin, lambda a, y, g: g * np.cos(a))

    def relu(self):
        return _unary(
            self,
            lambda a: np.maximum(a, 0.0),
            lambda a, y, g: g * (a > 0.0).astype(np.float32),
        )

    def square(self):
        return _unary(self, np.square, lambda a, y, g: g * 2.0 * a)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

        def vjp(g, shape=self.data.shape, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).astype(np.float32)

        return _make_op(out_data, [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape plumbing ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = np.ascontiguousarray(self.data.reshape(shape))

        def vjp(g, shape=self.data.shape):
            return np.ascontiguousarray(g.reshape(shape))

        return _make_op(out_data, [(self, vjp)])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out_data = np.ascontiguousarray(self.data.transpose(axes))

        def vjp(g, inverse=inverse):
            return np.ascontiguousarray(g.transpose(inverse))

        return _make_op(out_data, [(self, vjp)])

    def maximum(self, other):
        def d_a(a, b, g):
            return g * (a >= b).astype(np.float32)

        def d_b(a, b, g):
            return g * (a < b).astype(np.float32)

        return _binary(self, other, np.maximum, d_a, d_b)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make_op(out_data: np.ndarray, inputs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == np.float32 else out_data.astype(np.float32)
    out.grad = None
    tp = _active_tape()
    if tp is not None and any(t.requires_grad for t, _ in inputs):
        out.requires_grad = True
        tp.record(out, inputs)
    else:
        out.requires_grad = False
    return out


def make_op(out_data, inputs) -> Tensor:
    """Extension hook: wrap ``out_data`` as the output of a custom taped op.

    ``inputs`` pairs each input Tensor with a vjp callable; modules with
    hand-written adjoints (warping, splatting) register through this.
    """
    return _make_op(_as_array(out_data), inputs)


def _check_broadcast(sa: tuple, sb: tuple):
    if len(sa) != len(sb):
        raise ValueError(f"rank mismatch between shapes {sa} and {sb}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the axes that were broadcast up from ``shape``."""
    if g.shape == tuple(shape):
        return g.astype(np.float32, copy=False)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape).astype(np.float32, copy=False)


def _binary(a, b, fwd, d_a, d_b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    if a.data.shape != b.data.shape and a.data.ndim > 0 and b.data.ndim > 0:
        _check_broadcast(a.data.shape, b.data.shape)
    out_data = fwd(a.data, b.data)
    ad, bd = a.data, b.data
    inputs = [
        (a, lambda g: _reduce_to(np.broadcast_to(d_a(ad, bd, g), g.shape), ad.shape)),
        (b, lambda g: _reduce_to(np.broadcast_to(d_b(ad, bd, g), g.shape), bd.shape)),
    ]
    return _make_op(out_data, inputs)


def _unary(a, fwd, d_a) -> Tensor:
    a = _wrap(a)
    out_data = fwd(a.data)
    ad = a.data
    return _make_op(out_data, [(a, lambda g: d_a(ad, out_data, g))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back by extent."""
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    inputs = []
    offset = 0
    for t in tensors:
        extent = t.data.shape[axis]

        def vjp(g, lo=offset, hi=offset + extent, axis=axis):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return np.ascontiguousarray(g[tuple(index)])

        inputs.append((t, vjp))
        offset += extent
    return _make_op(out_data, inputs)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with deterministic BLAS accumulation."""
    a = _wrap(a)
    b = _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    ad, bd = a.data, b.data
    inputs = [
        (a, lambda g: np.ascontiguousarray(g @ bd.T)),
        (b, lambda g: np.ascontiguousarray(ad.T @ g)),
    ]
    return _make_op(out_data, inputs)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    batch, chans, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
        batch * out_h * out_w, chans * kh * kw
    )
    return np.ascontiguousarray(cols), out_h, out_w


def _col2im(cols, x_shape, kh, kw, stride, pad, out_h, out_w):
    batch, chans, h, w = x_shape
    padded = np.zeros((batch, chans, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    blocks = cols.reshape(batch, out_h, out_w, chans, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + out_h * stride : stride, j : j + out_w * stride : stride] += blocks[
                :, :, i, j
            ]
    if pad:
        return np.ascontiguousarray(padded[:, :, pad : pad + h, pad : pad + w])
    return padded


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of [B,C,H,W] with [O,C,kh,kw], zero padding."""
    x = _wrap(x)
    w = _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/kernel, got {x.shape} and {w.shape}")
    batch, chans, h, width = x.data.shape
    out_c, in_c, kh, kw = w.data.shape
    if in_c != chans:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            f"non-positive output size {out_h}x{out_w} for input {h}x{width}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )

    cols, out_h, out_w = _im2col(x.data, kh, kw, stride, pad)
    w2d = w.data.reshape(out_c, in_c * kh * kw)
    out2d = cols @ w2d.T  # [B*Ho*Wo, O]
    out_data = np.ascontiguousarray(
        out2d.reshape(batch, out_h, out_w, out_c).transpose(0, 3, 1, 2)
    )

    x_shape = x.data.shape

    def d_x(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(batch * out_h * out_w, out_c)
        dcols = g2d @ w2d
        return _col2im(dcols, x_shape, kh, kw, stride, pad, out_h, out_w)

    def d_w(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(batch * out_h * out_w, out_c)
        return np.ascontiguousarray((g2d.T @ cols).reshape(out_c, in_c, kh, kw))

    return _make_op(out_data, [(x, d_x), (w, d_w)])


# -- tensor file format ---------------------------------------------------

_STIF_MAGIC = b"STIF"


def write_stif(path, array):
    """Write an array: magic 'STIF', u8 rank, u32-LE extents, f32-LE payload."""
    if isinstance(array, Tensor):
        array = array.data
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds format limit")
    with open(path, "wb") as fh:
        fh.write(_STIF_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_stif(path) -> np.ndarray:
    """Read a tensor file written by :func:`write_stif`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _STIF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_STIF_MAGIC!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return arr.astype(np.float32).reshape(shape)
