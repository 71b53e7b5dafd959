"""Minimal reverse-mode autodiff over dense numpy arrays.

Ops run eagerly on ``GradTensor.values`` and, when a ``Tape`` is active and
gradients are wanted, append ``(output, backward_fn)`` records to it.
Records are appended in execution order, so walking them in reverse is a
valid reverse topological order; each ``backward_fn`` receives the output's
accumulated gradient and scatters contributions into its inputs.

Scope is deliberately small: exactly the primitives the guidance encoder
and the differentiable search need. Binary ops accept equal shapes or a
scalar (size-1) operand; anything else raises ``ShapeMismatch``. Python
numbers are promoted to constant tensors. All math is float64.

Gradient-flow control:

* ``detach(t)`` re-wraps values with no history; used where the search
  update rules require a term to act as a constant.
* ``st_argmax`` is a straight-through estimator: one-hot forward, identity
  backward.

A tape may be walked backward once (``TapeConsumed`` afterwards). During
the walk, records and the gradients of non-leaf tensors are freed as soon
as they are fully consumed, which keeps long unrolled searches from
holding every intermediate gradient at once.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import AllZeroInput, NotScalar, ShapeMismatch, TapeConsumed

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Recording context for one forward pass."""

    __slots__ = ("_records", "_consumed")

    def __init__(self) -> None:
        self._records: list = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("another tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def __len__(self) -> int:
        return len(self._records)


class GradTensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("values", "grad", "requires_grad", "is_leaf", "tape")

    def __init__(self, values, requires_grad: bool = False) -> None:
        arr = np.asarray(values)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"GradTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; canonical API is the module-level functions.
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
        return neg(self)


def _wrap(x) -> GradTensor:
    if isinstance(x, GradTensor):
        return x
    return GradTensor(np.asarray(x, dtype=np.float64))


def _out(values: np.ndarray, requires_grad: bool) -> GradTensor:
    t = GradTensor.__new__(GradTensor)
    t.values = values
    t.grad = None
    t.requires_grad = requires_grad
    t.is_leaf = not requires_grad
    t.tape = None
    return t


def _record(out: GradTensor, fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out.is_leaf = False
        out.tape = tape
        tape._records.append((out, fn))


def _accum(t: GradTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if np.shape(g) != t.values.shape:
        # size-1 operand of a broadcast op: collapse the upstream gradient
        g = np.asarray(np.sum(g)).reshape(t.values.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _check_binary(a: GradTensor, b: GradTensor, name: str) -> None:
    if a.values.shape == b.values.shape:
        return
    if a.values.size == 1 or b.values.size == 1:
        return
    raise ShapeMismatch(f"{name}: shapes {a.values.shape} and {b.values.shape} do not broadcast")


def backward(loss: GradTensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``loss`` must be a size-1 tensor recorded on a tape. The tape is
    consumed: records are dropped as they are replayed and a second call
    raises ``TapeConsumed``.
    """
    if loss.values.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.values.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape")
    if tape._consumed:
        raise TapeConsumed("this tape has already been walked backward")
    tape._consumed = True
    loss.grad = np.ones_like(loss.values)
    records = tape._records
    for i in range(len(records) - 1, -1, -1):
        out, fn = records[i]
        records[i] = None
        if out.grad is not None:
            fn(out.grad)
            out.grad = None
    records.clear()


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def detach(a: GradTensor) -> GradTensor:
    """Same values, no history: gradients never flow through the result."""
    return _out(a.values, False)


def constant(x) -> GradTensor:
    return _wrap(x)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> GradTensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    rg = a.requires_grad or b.requires_grad
    out = _out(a.values + b.values, rg)

    def fn(up):
        _accum(a, up)
        _accum(b, up)

    _record(out, fn)
    return out


def sub(a, b) -> GradTensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    rg = a.requires_grad or b.requires_grad
    out = _out(a.values - b.values, rg)

    def fn(up):
        _accum(a, up)
        _accum(b, -up)

    _record(out, fn)
    return out


def mul(a, b) -> GradTensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    rg = a.requires_grad or b.requires_grad
    out = _out(a.values * b.values, rg)

    def fn(up):
        if a.requires_grad:
            _accum(a, up * b.values)
        if b.requires_grad:
            _accum(b, up * a.values)

    _record(out, fn)
    return out


def div(a, b) -> GradTensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    rg = a.requires_grad or b.requires_grad
    out = _out(a.values / b.values, rg)

    def fn(up):
        if a.requires_grad:
            _accum(a, up / b.values)
        if b.requires_grad:
            _accum(b, -(up * out.values) / b.values)

    _record(out, fn)
    return out


def neg(a) -> GradTensor:
    a = _wrap(a)
    out = _out(-a.values, a.requires_grad)

    def fn(up):
        _accum(a, -up)

    _record(out, fn)
    return out


def scale(a, c: float) -> GradTensor:
    """Multiply by a compile-time constant (no gradient w.r.t. ``c``)."""
    a = _wrap(a)
    c = float(c)
    out = _out(a.values * c, a.requires_grad)

    def fn(up):
        _accum(a, up * c)

    _record(out, fn)
    return out


def exp(a) -> GradTensor:
    a = _wrap(a)
    out = _out(np.exp(a.values), a.requires_grad)

    def fn(up):
        _accum(a, up * out.values)

    _record(out, fn)
    return out


def sigmoid(a) -> GradTensor:
    a = _wrap(a)
    v = a.values
    # evaluate the numerically stable branch per sign
    pos = v >= 0
    z = np.empty_like(v)
    z[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    z[~pos] = ez / (1.0 + ez)
    out = _out(z, a.requires_grad)

    def fn(up):
        _accum(a, up * out.values * (1.0 - out.values))

    _record(out, fn)
    return out


def abs_(a) -> GradTensor:
    """|a| with subgradient sign(a); sign(0) = 0."""
    a = _wrap(a)
    out = _out(np.abs(a.values), a.requires_grad)

    def fn(up):
        _accum(a, up * np.sign(a.values))

    _record(out, fn)
    return out


def leaky_relu(a, slope: float = 0.01) -> GradTensor:
    a = _wrap(a)
    v = a.values
    # for slope in [0, 1] this equals where(v > 0, v, slope * v) bit for bit
    if 0.0 <= slope <= 1.0:
        out_v = np.maximum(v, slope * v)
    else:
        out_v = np.where(v > 0, v, slope * v)
    out = _out(out_v, a.requires_grad)

    def fn(up):
        _accum(a, up * np.where(v > 0, 1.0, slope))

    _record(out, fn)
    return out


def min2(a, b) -> GradTensor:
    """Elementwise minimum; on ties the gradient routes to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "min2")
    take_a = a.values <= b.values
    rg = a.requires_grad or b.requires_grad
    out = _out(np.where(take_a, a.values, b.values), rg)

    def fn(up):
        if a.requires_grad:
            _accum(a, up * take_a)
        if b.requires_grad:
            _accum(b, up * ~take_a)

    _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(a) -> GradTensor:
    a = _wrap(a)
    out = _out(np.asarray(a.values.sum()), a.requires_grad)

    def fn(up):
        _accum(a, np.broadcast_to(up, a.values.shape))

    _record(out, fn)
    return out


def inner(a, b) -> GradTensor:
    """Scalar inner product of two equal-shape tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"inner: shapes {a.values.shape} and {b.values.shape} differ")
    rg = a.requires_grad or b.requires_grad
    out = _out(np.asarray(np.vdot(a.values, b.values)), rg)

    def fn(up):
        if a.requires_grad:
            _accum(a, up * b.values)
        if b.requires_grad:
            _accum(b, up * a.values)

    _record(out, fn)
    return out


def reshape(a, shape) -> GradTensor:
    a = _wrap(a)
    out = _out(a.values.reshape(shape), a.requires_grad)

    def fn(up):
        _accum(a, up.reshape(a.values.shape))

    _record(out, fn)
    return out


def concat_ch(a, b) -> GradTensor:
    """Concatenate two (C, H, W) stacks along the channel axis."""
    a, b = _wrap(a), _wrap(b)
    if a.values.shape[1:] != b.values.shape[1:]:
        raise ShapeMismatch("concat_ch needs matching spatial shapes")
    ca = a.values.shape[0]
    rg = a.requires_grad or b.requires_grad
    out = _out(np.concatenate((a.values, b.values), axis=0), rg)

    def fn(up):
        _accum(a, up[:ca])
        _accum(b, up[ca:])

    _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# stencil / spatial primitives


def _shift_correlate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation of a 2D array with a small kernel."""
    h, w = arr.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(arr, ((ph, ph), (pw, pw)))
    out = np.zeros_like(arr)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                out += k * padded[i:i + h, j:j + w]
    return out


def conv2d_fixed(a, kernel: np.ndarray) -> GradTensor:
    """Correlate a 2D tensor with a constant odd-sized kernel, same padding."""
    a = _wrap(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if a.values.ndim != 2 or kernel.ndim != 2:
        raise ShapeMismatch("conv2d_fixed needs a 2D input and kernel")
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ShapeMismatch("conv2d_fixed kernel dims must be odd")
    out = _out(_shift_correlate(a.values, kernel), a.requires_grad)

    def fn(up):
        _accum(a, _shift_correlate(up, kernel[::-1, ::-1]))

    _record(out, fn)
    return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    p = k // 2
    if p:
        # hand-rolled zero pad: np.pad's generic machinery costs more than
        # the copy itself at these sizes
        xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, p:p + h, p:p + w] = x
    else:
        xp = x
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, (c, k, k, h, w), (s0, s1, s2, s1, s2))
    return win.reshape(c * k * k, h * w)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    c, h, w = shape
    p = k // 2
    dxp = np.zeros((c, h + 2 * p, w + 2 * p))
    d = dcols.reshape(c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w] += d[:, i, j]
    return dxp[:, p:p + h, p:p + w] if p else dxp


def conv2d_learned(x, w, bias) -> GradTensor:
    """Same-padded stride-1 convolution with learned weights.

    ``x`` is (Cin, H, W), ``w`` is (Cout, Cin, k, k) with odd k, ``bias``
    is (Cout,). Lowered to a matmul over unfolded patches; the unfold is
    recomputed in the backward pass instead of being kept alive.
    """
    x, w, bias = _wrap(x), _wrap(w), _wrap(bias)
    if x.values.ndim != 3 or w.values.ndim != 4:
        raise ShapeMismatch("conv2d_learned needs (Cin,H,W) input and (Cout,Cin,k,k) weights")
    cout, cin, k, k2 = w.values.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch("conv2d_learned kernel must be square with odd size")
    if x.values.shape[0] != cin:
        raise ShapeMismatch(f"input has {x.values.shape[0]} channels, weights expect {cin}")
    if bias.values.shape != (cout,):
        raise ShapeMismatch("bias shape must be (Cout,)")
    _, h, wd = x.values.shape
    wmat = w.values.reshape(cout, -1)
    cols = _im2col(x.values, k)
    out_v = (wmat @ cols + bias.values[:, None]).reshape(cout, h, wd)
    rg = x.requires_grad or w.requires_grad or bias.requires_grad
    out = _out(out_v, rg)

    def fn(up):
        upm = up.reshape(cout, -1)
        if w.requires_grad:
            _accum(w, (upm @ _im2col(x.values, k).T).reshape(w.values.shape))
        if bias.requires_grad:
            _accum(bias, up.sum(axis=(1, 2)))
        if x.requires_grad:
            _accum(x, _col2im(wmat.T @ upm, x.values.shape, k))

    _record(out, fn)
    return out


def maxpool2(a) -> GradTensor:
    """2x2 max pooling over (C, H, W); H and W must be even.

    On ties within a window the first cell in row-major window order wins,
    and the gradient follows only that cell.
    """
    a = _wrap(a)
    c, h, w = a.values.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2 needs even spatial dims, got {h}x{w}")
    if _active_tape() is None or not a.requires_grad:
        # nothing to record: take window maxima off strided views and skip
        # the argmax bookkeeping (same values, no tie index needed)
        v = a.values
        out_v = np.maximum(
            np.maximum(v[:, 0::2, 0::2], v[:, 0::2, 1::2]),
            np.maximum(v[:, 1::2, 0::2], v[:, 1::2, 1::2]),
        )
        return _out(out_v, a.requires_grad)
    win = a.values.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out_v = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _out(out_v, a.requires_grad)

    def fn(up):
        dwin = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, idx[..., None], up[..., None], axis=-1)
        da = dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        _accum(a, da)

    _record(out, fn)
    return out


def upsample2(a) -> GradTensor:
    """Nearest-neighbor 2x upsampling over (C, H, W)."""
    a = _wrap(a)
    if a.values.ndim != 3:
        raise ShapeMismatch("upsample2 needs a (C, H, W) input")
    c, h, w = a.values.shape
    out = _out(np.repeat(np.repeat(a.values, 2, axis=1), 2, axis=2), a.requires_grad)

    def fn(up):
        _accum(a, up.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    _record(out, fn)
    return out


def st_argmax(a, index: int | None = None) -> GradTensor:
    """Straight-through argmax over a 2D tensor.

    Forward: one-hot of the largest entry, row-major first on ties.
    Backward: identity (the upstream gradient passes through unchanged).
    ``index`` optionally pins the hot cell; callers use it when they have
    already resolved the winner by an exact comparison on the same values.
    Raises ``AllZeroInput`` unless the selected entry is strictly positive.
    """
    a = _wrap(a)
    if a.values.ndim != 2:
        raise ShapeMismatch("st_argmax needs a 2D input")
    flat = a.values.ravel()
    if index is None:
        index = int(flat.argmax())
    if not flat[index] > 0.0:
        raise AllZeroInput("st_argmax needs a strictly positive maximum")
    hot = np.zeros_like(a.values)
    hot.ravel()[index] = 1.0
    out = _out(hot, a.requires_grad)

    def fn(up):
        _accum(a, up)

    _record(out, fn)
    return out
