"""Dense tensor engine with reverse-mode differentiation.

Values live in contiguous row-major numpy arrays, float32 for training and
inference and float64 for verification runs.  Every operation returns a fresh
``Tensor`` that records its parents and a backward closure; the implicit graph
is define-by-run and acyclic by construction.  ``backward`` on a scalar walks
the graph once in reverse topological order and accumulates gradients into
every reachable tensor with ``requires_grad``;  a graph is single-use, so
build a fresh forward per step.  Calling ``backward`` twice on the same root
raises :class:`UsageError`.

Concurrency: reading shared tensors (inference under ``no_grad``) is safe
from multiple threads; gradient recording state is thread-local, and training
assumes a single writer.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, UsageError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference forwards)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy-backed array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_ran")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # Keep storage contiguous row-major; ascontiguousarray would widen
        # 0-d scalars to 1-d, so only copy when actually needed.
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents = ()
        self._backward = None
        self._ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Convenience arithmetic; the heavy ops below are plain functions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scale_shift(self, 1.0, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scale_shift(self, 1.0, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale_shift(self, float(other), 0.0)

    __rmul__ = __mul__

    def backward(self):
        backward(self)


def _result(data, parents, op, backward_fn):
    """Wrap an op result; drops the tape when no parent needs gradients."""
    out = Tensor(data)
    out.op = op
    need = _grad_enabled() and any(p.requires_grad for p in parents)
    if need:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise UsageError(f"mixed dtypes in one operation: {dt} vs {t.data.dtype}")
    return dt


def topo_order(root):
    """Operation records reachable from ``root``, parents before children."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor.

    ``loss`` must hold a single element.  Each graph may be walked once.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._ran:
        raise UsageError("backward was already called on this graph; build a fresh forward")
    loss._ran = True
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _broadcast_kind(a, b):
    """'same' for equal shapes, 'chan' when b is an N1HW map over a's channels."""
    if a.shape == b.shape:
        return "same"
    if (
        len(a.shape) == 4
        and len(b.shape) == 4
        and b.shape[1] == 1
        and a.shape[0] == b.shape[0]
        and a.shape[2:] == b.shape[2:]
    ):
        return "chan"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (axis 1 must broadcast from 1)")


def add(a, b):
    _check_dtype(a, b)
    kind = _broadcast_kind(a, b)

    def back(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g if kind == "same" else g.sum(axis=1, keepdims=True))

    return _result(a.data + b.data, (a, b), "add", back)


def sub(a, b):
    _check_dtype(a, b)
    kind = _broadcast_kind(a, b)

    def back(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g if kind == "same" else -g.sum(axis=1, keepdims=True))

    return _result(a.data - b.data, (a, b), "sub", back)


def mul(a, b):
    _check_dtype(a, b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accum(a, g * bd)
        if b.requires_grad:
            gb = g * ad
            _accum(b, gb if kind == "same" else gb.sum(axis=1, keepdims=True))

    return _result(ad * bd, (a, b), "mul", back)


def scale_shift(a, k, c=0.0):
    """k * a + c with float constants."""

    def back(g):
        if a.requires_grad:
            _accum(a, g * k)

    return _result(a.data * k + c, (a,), "scale_shift", back)


def square(a):
    ad = a.data

    def back(g):
        if a.requires_grad:
            _accum(a, g * (2.0 * ad))

    return _result(ad * ad, (a,), "square", back)


def abs_val(a):
    ad = a.data

    def back(g):
        if a.requires_grad:
            _accum(a, g * np.sign(ad))

    return _result(np.abs(ad), (a,), "abs", back)


def sum_all(a):
    shape, dt = a.data.shape, a.data.dtype

    def back(g):
        if a.requires_grad:
            _accum(a, np.full(shape, g, dtype=dt))

    return _result(a.data.sum(), (a,), "sum", back)


def mean_all(a):
    shape, dt = a.data.shape, a.data.dtype
    n = a.data.size

    def back(g):
        if a.requires_grad:
            _accum(a, np.full(shape, g / n, dtype=dt))

    return _result(a.data.mean(), (a,), "mean", back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a):
    mask = a.data > 0

    def back(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), "relu", back)


def selu(a):
    x = a.data
    pos = x > 0
    # expm1 keeps the negative branch accurate near zero; clipping the
    # exponent argument at 0 avoids overflow warnings on the unused side.
    e = np.exp(np.minimum(x, 0.0))
    out = np.where(pos, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))

    def back(g):
        if a.requires_grad:
            _accum(a, g * np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * e))

    return _result(out.astype(x.dtype, copy=False), (a,), "selu", back)


def sigmoid(a):
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)

    def back(g):
        if a.requires_grad:
            _accum(a, g * (out * (1.0 - out)))

    return _result(out, (a,), "sigmoid", back)


_ACTIVATIONS = {"relu": relu, "selu": selu, "sigmoid": sigmoid}


def activation(a, kind):
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise UsageError(f"unknown activation kind '{kind}'") from None


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis.

    Zero-channel operands are legal and act as identities.
    """
    if len(a.shape) != 4 or len(b.shape) != 4:
        raise ShapeError(f"concat_channels needs 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels mismatch outside axis 1: {a.shape} vs {b.shape}")
    _check_dtype(a, b)
    ca = a.shape[1]

    def back(g):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat", back)


def slice_channels(a, start, stop):
    if len(a.shape) != 4:
        raise ShapeError(f"slice_channels needs a 4-d tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {a.shape[1]} channels")
    shape, dt = a.shape, a.dtype

    def back(g):
        if a.requires_grad:
            buf = np.zeros(shape, dtype=dt)
            buf[:, start:stop] = g
            _accum(a, buf)

    return _result(a.data[:, start:stop].copy(), (a,), "slice", back)


def _reflect_indices(n, pad_lo, pad_hi):
    """Source index for each position of an array reflect-padded on one axis.

    Uses whole-sample reflection with period 2(n-1), so pads wider than the
    axis fold back correctly; n == 1 degenerates to replication.
    """
    q = np.arange(-pad_lo, n + pad_hi)
    if n == 1:
        return np.zeros_like(q)
    m = 2 * n - 2
    r = np.mod(q, m)
    return np.where(r < n, r, m - r)


def _fold_axis(g, idx, n, axis):
    """Adjoint of an index-gather along ``axis``: scatter-add back to size n."""
    out_shape = list(g.shape)
    out_shape[axis] = n
    out = np.zeros(out_shape, dtype=g.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
    return out


def pad_reflect(a, pad_h, pad_w):
    """Reflect-pad the two spatial axes of an NCHW tensor.

    ``pad_h``/``pad_w`` are (before, after) pairs or single ints applied to
    both sides.
    """
    if len(a.shape) != 4:
        raise ShapeError(f"pad_reflect needs a 4-d tensor, got {a.shape}")
    ph = (pad_h, pad_h) if np.isscalar(pad_h) else tuple(pad_h)
    pw = (pad_w, pad_w) if np.isscalar(pad_w) else tuple(pad_w)
    n, c, h, w = a.shape
    idx_h = _reflect_indices(h, *ph)
    idx_w = _reflect_indices(w, *pw)
    out = a.data[:, :, idx_h[:, None], idx_w[None, :]]

    def back(g):
        if a.requires_grad:
            _accum(a, _fold_axis(_fold_axis(g, idx_h, h, 2), idx_w, w, 3))

    return _result(out, (a,), "pad_reflect", back)


def crop(a, h, w):
    """Keep the top-left h x w window of the spatial axes."""
    if len(a.shape) != 4:
        raise ShapeError(f"crop needs a 4-d tensor, got {a.shape}")
    if h > a.shape[2] or w > a.shape[3]:
        raise ShapeError(f"crop to {h}x{w} exceeds input {a.shape[2]}x{a.shape[3]}")
    shape, dt = a.shape, a.dtype

    def back(g):
        if a.requires_grad:
            buf = np.zeros(shape, dtype=dt)
            buf[:, :, :h, :w] = g
            _accum(a, buf)

    return _result(a.data[:, :, :h, :w].copy(), (a,), "crop", back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, dilation=1, padding="reflect"):
    """2-d convolution, NCHW input and OIHW weight.

    ``padding`` is one of ``"valid"``, ``"zero"``, ``"reflect"``; the two
    "same" modes pad by dilation*(k-1)/2 per side (odd kernels only) and give
    ceil(H/stride) output rows.  Bias is optional with shape (O,).
    """
    if len(x.shape) != 4:
        raise ShapeError(f"conv2d input must be 4-d, got {x.shape}")
    if len(w.shape) != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv2d stride/dilation must be >= 1, got {stride}/{dilation}")
    parents = [x, w]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        _check_dtype(x, w, b)
        parents.append(b)
    else:
        _check_dtype(x, w)

    if padding == "valid":
        ph = pw = 0
    elif padding in ("zero", "reflect"):
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same-size padding needs odd kernels, got {kh}x{kw}")
        ph = dilation * (kh - 1) // 2
        pw = dilation * (kw - 1) // 2
    else:
        raise UsageError(f"unknown padding mode '{padding}'")

    idx_h = idx_w = None
    if padding == "reflect" and (ph or pw):
        idx_h = _reflect_indices(h, ph, ph)
        idx_w = _reflect_indices(wdt, pw, pw)
        xp = x.data[:, :, idx_h[:, None], idx_w[None, :]]
    elif ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.data

    hp, wp = xp.shape[2], xp.shape[3]
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    if hp < eff_h or wp < eff_w:
        raise ShapeError(
            f"conv2d kernel footprint {eff_h}x{eff_w} exceeds padded input {hp}x{wp}"
        )
    ho = (hp - eff_h) // stride + 1
    wo = (wp - eff_w) // stride + 1

    # Gather taps into (N, Cin, kh, kw, Ho, Wo); one strided copy per tap.
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi : hi + (ho - 1) * stride + 1 : stride,
                                  wj : wj + (wo - 1) * stride + 1 : stride]
    cols_mat = cols.reshape(n, cin * kh * kw, ho * wo)
    w_mat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w_mat, cols_mat).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def back(g):
        g_mat = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            gw = np.tensordot(g_mat, cols_mat, axes=([0, 2], [0, 2]))
            _accum(w, gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                hi = i * dilation
                for j in range(kw):
                    wj = j * dilation
                    gxp[:, :, hi : hi + (ho - 1) * stride + 1 : stride,
                        wj : wj + (wo - 1) * stride + 1 : stride] += gcols[:, :, i, j]
            if idx_h is not None:
                gx = _fold_axis(_fold_axis(gxp, idx_h, h, 2), idx_w, wdt, 3)
            elif ph or pw:
                gx = gxp[:, :, ph : ph + h, pw : pw + wdt]
            else:
                gx = gxp
            _accum(x, gx)

    return _result(out, tuple(parents), "conv2d", back)


# ---------------------------------------------------------------------------
# group normalization
# ---------------------------------------------------------------------------


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize channel groups to zero mean / unit variance, then affine."""
    if len(x.shape) != 4:
        raise ShapeError(f"group_norm input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    _check_dtype(x, gamma, beta)

    xg = x.data.reshape(n, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def back(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, c // groups, h, w)
            xh = xhat.reshape(n, groups, c // groups, h, w)
            m1 = dxhat.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (dxhat * xh).mean(axis=(2, 3, 4), keepdims=True)
            gx = (dxhat - m1 - xh * m2) * inv
            _accum(x, gx.reshape(n, c, h, w))

    return _result(out, (x, gamma, beta), "group_norm", back)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _nearest_matrix(n_out, n_in, dtype):
    src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), src] = 1.0
    return m


def _bilinear_matrix(n_out, n_in, dtype):
    # Half-pixel-centre convention; edges clamp, so constants are preserved.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(int)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(int)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1.0 - t))
    np.add.at(m, (rows, i1), t)
    return m


def resample(x, out_h, out_w, mode="bilinear"):
    """Resize the spatial axes of an NCHW tensor.

    Both modes use the half-pixel (align_corners=false) convention.  The
    resampling is expressed as two small interpolation matrices, so the
    backward pass is their exact transpose.
    """
    if len(x.shape) != 4:
        raise ShapeError(f"resample input must be 4-d, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resample target {out_h}x{out_w} must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def back_id(g):
            if x.requires_grad:
                _accum(x, g)
        return _result(x.data.copy(), (x,), f"resample_{mode}", back_id)

    if mode == "bilinear":
        mh = _bilinear_matrix(out_h, h, x.dtype)
        mw = _bilinear_matrix(out_w, w, x.dtype)
    elif mode == "nearest":
        mh = _nearest_matrix(out_h, h, x.dtype)
        mw = _nearest_matrix(out_w, w, x.dtype)
    else:
        raise UsageError(f"unknown resample mode '{mode}'")

    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def back(g):
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(mh.T, g), mw))

    return _result(out, (x,), f"resample_{mode}", back)
