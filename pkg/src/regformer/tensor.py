"""Dense float64 tensors with a dynamically recorded gradient tape.

Everything the network touches is a :class:`Tensor`: a contiguous float64
ndarray plus an optional gradient buffer.  Gradients are produced by
reverse-mode differentiation over a :class:`Tape` that records operations in
the order they execute (define-by-run).  Recording only happens while a tape
is active, so inference runs with zero bookkeeping overhead.

Typical training step::

    with Tape() as tape:
        loss = l1_loss(model.forward(store, batch), target)
        tape.backward(loss)
    # leaf .grad buffers are now populated

Broadcasting in the elementwise ops is deliberately narrow: the second
operand may be a single scalar or may have extent 1 on the leading (channel)
axis, nothing else.  Anything fancier raises ``ShapeError``.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "matmul",
    "softmax",
    "pixel_unshuffle",
    "pixel_shuffle",
    "pixel_unshuffle_raw",
    "reshape",
    "transpose2d",
    "narrow",
    "concat",
    "absolute",
    "sum_all",
    "mean_all",
    "scale_channels",
    "l2_normalize_rows",
    "detach",
    "no_grad",
]


class TensorError(Exception):
    """Base class for tensor/tape failures."""


class ShapeError(TensorError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(TensorError):
    """A forward operation produced NaN or Inf."""


class TapeError(TensorError):
    """Tape misuse: backward on a non-scalar, re-use of a consumed tape, ..."""


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        self._tape = _active_tape()
        _local.tape = None
        return self

    def __exit__(self, *exc):
        _local.tape = self._tape
        return False


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    ``data`` is always a float64 ndarray; ``grad`` is either ``None`` or an
    ndarray of identical shape.  ``requires_grad`` on a leaf marks it as a
    differentiation target; on op outputs it simply means "this value is
    connected to some leaf through the active tape".
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient buffer, or zeros for leaves the loss never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- convenience arithmetic -------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return mul(sub(self, _as_tensor(other)), _as_tensor(-1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def detach(self):
        return detach(self)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of the ops executed under it.

    Creation order is topological by construction, so ``backward`` is a
    single reverse sweep that visits each node exactly once.  A tape is
    confined to the thread that opened it and is consumed by ``backward``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False
        self._entered = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        if self._entered:
            raise TapeError("tape cannot be re-entered; create a fresh one")
        self._entered = True
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and sweep the record in reverse.

        Populates ``.grad`` on every requires-grad leaf the loss reaches;
        leaves it ``None`` elsewhere (read as zero).  Intermediate gradient
        buffers are released as soon as their node has been processed.
        """
        if loss.data.size != 1:
            raise TapeError("backward requires a scalar loss")
        if self._consumed:
            raise TapeError("tape already consumed; re-record the forward pass")
        if not loss.requires_grad:
            raise TapeError("loss is not connected to this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            node.backward(out_grad)
            node.out.grad = None
        self._nodes.clear()


def apply_op(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, check finiteness, and record it if taping.

    ``backward_fn(out_grad)`` must accumulate into the inputs via
    :func:`accumulate_grad`.  Kernels outside this module (conv, layer norm,
    ...) build their outputs through this same chokepoint.
    """
    # NaN/Inf both propagate through a sum, so one reduction checks the
    # whole buffer (an overflowing all-finite sum also trips this, which is
    # equally worth surfacing).
    if not np.isfinite(np.sum(out_data)):
        raise NonFiniteError("non-finite values produced by a forward op")
    tape = _active_tape()
    recording = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor._wrap(out_data, recording)
    if recording:
        tape._nodes.append(_Node(out, backward_fn))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# -- elementwise ----------------------------------------------------------


def _broadcast_kind(a_shape, b_shape):
    """Classify how ``b`` maps onto ``a``: 'same', 'scalar' or 'channel'."""
    if a_shape == b_shape:
        return "same"
    if int(np.prod(b_shape)) == 1:
        return "scalar"
    if len(b_shape) == len(a_shape) and b_shape[0] == 1 and b_shape[1:] == a_shape[1:]:
        return "channel"
    raise ShapeError(
        f"cannot broadcast {b_shape} onto {a_shape}: only a scalar or a "
        "leading-axis singleton is allowed"
    )


def _reduce_to(g: np.ndarray, kind: str, b_shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.sum(g).reshape(b_shape)
    return np.sum(g, axis=0, keepdims=True)


def _ew(kind: str, a: Tensor, b: Tensor) -> Tensor:
    bkind = _broadcast_kind(a.shape, b.shape)
    bdat = b.data if bkind != "scalar" else b.data.reshape(())
    if kind == "add":
        out = a.data + bdat
    elif kind == "sub":
        out = a.data - bdat
    elif kind == "mul":
        out = a.data * bdat
    else:
        raise ValueError(f"unknown elementwise op {kind!r}")

    def backward(g):
        if kind == "add":
            accumulate_grad(a, g)
            accumulate_grad(b, _reduce_to(g, bkind, b.shape))
        elif kind == "sub":
            accumulate_grad(a, g)
            accumulate_grad(b, _reduce_to(-g, bkind, b.shape))
        else:
            accumulate_grad(a, g * bdat)
            accumulate_grad(b, _reduce_to(g * a.data, bkind, b.shape))

    return apply_op(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _ew("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _ew("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _ew("mul", a, b)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return apply_op(out, (a, b), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    if axis >= t.data.ndim or axis < -t.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {t.data.ndim}")
    shifted = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        accumulate_grad(t, y * (g - inner))

    return apply_op(y, (t,), backward)


# -- shape manipulation ---------------------------------------------------


def _unshuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    out = x.reshape(c, h // r, r, w // r, r)
    out = out.transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(out.reshape(c * r * r, h // r, w // r))


def _shuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    out = x.reshape(c // (r * r), r, r, h, w)
    out = out.transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(out.reshape(c // (r * r), h * r, w * r))


def pixel_unshuffle_raw(x: np.ndarray, r: int) -> np.ndarray:
    """Array-level pixel_unshuffle for paths that never need gradients."""
    return _unshuffle_array(x, r)


def pixel_unshuffle(t: Tensor, r: int) -> Tensor:
    """Space-to-depth: (C,H,W) -> (C*r*r, H/r, W/r).

    Output channel c*r*r + u*r + v holds input channel c at row offset u and
    column offset v, so ``pixel_shuffle`` is the exact inverse.
    """
    c, h, w = t.shape
    if h % r or w % r:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by {r}")
    out = _unshuffle_array(t.data, r)

    def backward(g):
        accumulate_grad(t, _shuffle_array(g, r))

    return apply_op(out, (t,), backward)


def pixel_shuffle(t: Tensor, r: int) -> Tensor:
    """Depth-to-space: (C,H,W) -> (C/(r*r), H*r, W*r). Inverse of unshuffle."""
    c, h, w = t.shape
    if c % (r * r):
        raise ShapeError(f"channel count {c} not divisible by {r * r}")
    out = _shuffle_array(t.data, r)

    def backward(g):
        accumulate_grad(t, _unshuffle_array(g, r))

    return apply_op(out, (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}")
    out = t.data.reshape(shape)

    def backward(g):
        accumulate_grad(t, g.reshape(t.shape))

    return apply_op(out, (t,), backward)


def transpose2d(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeError("transpose2d expects a rank-2 tensor")
    out = t.data.T

    def backward(g):
        accumulate_grad(t, g.T)

    return apply_op(out, (t,), backward)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    extent = t.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(f"slice [{start}:{start + length}] outside extent {extent}")
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(t.data[index])

    def backward(g):
        full = np.zeros_like(t.data)
        full[index] = g
        accumulate_grad(t, full)

    return apply_op(out, (t,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim:
            raise ShapeError("concat rank mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, extents):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            accumulate_grad(t, g[tuple(index)])
            offset += n

    return apply_op(out, tuple(tensors), backward)


# -- reductions and pointwise helpers --------------------------------------


def absolute(t: Tensor) -> Tensor:
    out = np.abs(t.data)
    sign = np.sign(t.data)

    def backward(g):
        accumulate_grad(t, g * sign)

    return apply_op(out, (t,), backward)


def sum_all(t: Tensor) -> Tensor:
    out = np.sum(t.data).reshape(1)

    def backward(g):
        accumulate_grad(t, np.full_like(t.data, g.reshape(-1)[0]))

    return apply_op(out, (t,), backward)


def mean_all(t: Tensor) -> Tensor:
    n = t.size
    out = (np.sum(t.data) / n).reshape(1)

    def backward(g):
        accumulate_grad(t, np.full_like(t.data, g.reshape(-1)[0] / n))

    return apply_op(out, (t,), backward)


def scale_channels(t: Tensor, s: Tensor) -> Tensor:
    """Multiply channel c of a (C,...) tensor by s[c]."""
    if s.data.ndim != 1 or s.shape[0] != t.shape[0]:
        raise ShapeError(f"scale vector {s.shape} does not match channels {t.shape}")
    shp = (t.shape[0],) + (1,) * (t.data.ndim - 1)
    out = t.data * s.data.reshape(shp)

    def backward(g):
        accumulate_grad(t, g * s.data.reshape(shp))
        accumulate_grad(s, np.sum(g * t.data, axis=tuple(range(1, t.data.ndim))))

    return apply_op(out, (t, s), backward)


def l2_normalize_rows(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of a (R, N) tensor to unit L2 norm.

    Rows with norm below ``eps`` are divided by ``eps`` instead, so an
    all-zero row stays all-zero.
    """
    if t.data.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a rank-2 tensor")
    norms = np.sqrt(np.sum(t.data * t.data, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = t.data / denom

    def backward(g):
        # For guarded rows the map is x/eps, a plain scaling.
        inner = np.sum(g * y, axis=1, keepdims=True)
        gx = (g - y * inner) / denom
        guarded = norms < eps
        if np.any(guarded):
            gx = np.where(guarded, g / denom, gx)
        accumulate_grad(t, gx)

    return apply_op(y, (t,), backward)


def detach(t: Tensor) -> Tensor:
    """Stop-gradient: same values, no tape participation."""
    return Tensor._wrap(t.data, False)
