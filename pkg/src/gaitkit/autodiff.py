"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the operations the gait embedding network needs: 2-D
convolution (stride 1), 2x2 max pooling, leaky rectification, per-strip
affine heads, axis reductions and elementwise arithmetic.  Tensors default
to float32; float64 is used for gradient checking only.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if not np.issubdtype(a.dtype, np.floating):
        return a.astype(np.float32)
    return a


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    Tensors are treated as immutable once produced by an operation; only
    leaf parameters are updated in place (by the optimizer, between
    forward passes).
    """

    def __init__(self, data, requires_grad=False, dtype=None,
                 parents=(), backward=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
            if not t.requires_grad:
                t.grad = None  # keep gradients only on leaves

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t, g):
    if not t.requires_grad and t._backward is None and not t._parents:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    if not _needs_grad(a, b):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a, b), backward=bw)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    if not _needs_grad(a, b):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a, b), backward=bw)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    if not _needs_grad(a, b):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a, b), backward=bw)


# -- reductions ------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False))

    if not _needs_grad(x):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x,), backward=bw)


def tmean(x, axis=None, keepdims=False):
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.size if axis is None else x.shape[axis]

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, (np.broadcast_to(gg, x.shape) / n).astype(x.dtype, copy=False))

    if not _needs_grad(x):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x,), backward=bw)


def amax(x, axis):
    """Max along one axis; the gradient routes to the first maximal element."""
    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accumulate(x, dx)

    if not _needs_grad(x):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x,), backward=bw)


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape):
    out_data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    if not _needs_grad(x):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x,), backward=bw)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for "
                         f"axis {axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        _accumulate(x, dx)

    if not _needs_grad(x):
        return Tensor(np.ascontiguousarray(out_data))
    return Tensor(np.ascontiguousarray(out_data), parents=(x,), backward=bw)


def concatenate(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _accumulate(t, g[tuple(sl)])
            offset += s

    if not any(_needs_grad(t) for t in tensors):
        return Tensor(out_data)
    return Tensor(out_data, parents=tuple(tensors), backward=bw)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    if not any(_needs_grad(t) for t in tensors):
        return Tensor(out_data)
    return Tensor(out_data, parents=tuple(tensors), backward=bw)


# -- activations ------------------------------------------------------------

def leaky_rectify(x, slope=0.01):
    """x where x >= 0, slope*x otherwise."""
    pos = x.data >= 0
    out_data = np.where(pos, x.data, x.data * slope)

    def bw(g):
        _accumulate(x, np.where(pos, g, g * slope))

    if not _needs_grad(x):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x,), backward=bw)


# -- affine -------------------------------------------------------------------

def matmul(a, b):
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    if not _needs_grad(a, b):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a, b), backward=bw)


def strip_affine(x, w, b):
    """Independent affine map per strip.

    x: (batch, channels, strips); w: (strips, channels, out); b: (strips, out).
    Output: (batch, strips, out).  Strip i depends only on w[i], b[i].
    """
    batch, channels, strips = x.shape
    if w.shape[:2] != (strips, channels) or b.shape != (strips, w.shape[2]):
        raise ShapeError(f"strip_affine shapes inconsistent: x {x.shape}, "
                         f"w {w.shape}, b {b.shape}")
    out_data = np.einsum("bcs,sco->bso", x.data, w.data, optimize=True) + b.data

    def bw(g):
        _accumulate(x, np.einsum("bso,sco->bcs", g, w.data, optimize=True))
        _accumulate(w, np.einsum("bcs,bso->sco", x.data, g, optimize=True))
        _accumulate(b, g.sum(axis=0))

    if not _needs_grad(x, w, b):
        return Tensor(out_data)
    return Tensor(out_data, parents=(x, w, b), backward=bw)


# -- convolution / pooling ----------------------------------------------------

# im2col working buffers are capped at ~this many scalars per chunk so a
# full training batch never materializes gigabyte-scale column matrices.
_COL_CHUNK_SCALARS = 24_000_000


def _im2col(padded, kernel):
    # padded: (n, c, hp, wp) -> (n*ho*wo, c*k*k), row-major over (n, ho, wo)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)


def conv2d(x, w, b, pad):
    """Cross-correlation, stride 1, zero padding.

    x: (n, c_in, h, w) or (c_in, h, w); w: (c_out, c_in, k, k); b: (c_out,).
    The batch axis is processed in chunks; columns are recomputed in the
    backward pass instead of cached (they dominate memory otherwise).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weights, got {x.shape}, {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, wc_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if wc_in != c_in:
        raise ShapeError(f"conv2d input has {c_in} channels but weights expect {wc_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({c_out},)")
    ho = h + 2 * pad - k + 1
    wo = wd + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{wd}, "
                         f"kernel {k}, pad {pad}")

    wmat = w.data.reshape(c_out, c_in * k * k)
    per_item = max(1, ho * wo * c_in * k * k)
    chunk = max(1, min(n, _COL_CHUNK_SCALARS // per_item))

    def cols_for(lo, hi):
        padded = np.pad(x.data[lo:hi], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        return _im2col(padded, k)

    out_data = np.empty((n, c_out, ho, wo), dtype=x.dtype)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        part = (cols_for(lo, hi) @ wmat.T + b.data)
        out_data[lo:hi] = part.reshape(hi - lo, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        dw = np.zeros_like(w.data)
        db = np.zeros_like(b.data)
        need_dx = x.requires_grad or x._parents
        dx = np.empty_like(x.data) if need_dx else None
        if need_dx:
            # the input gradient is itself a correlation: the output gradient
            # against the channel-swapped, 180-degree-rotated kernel
            q = k - 1 - pad
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1)
            ).reshape(c_out * k * k, c_in)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            m = hi - lo
            gmat = np.ascontiguousarray(g[lo:hi].transpose(0, 2, 3, 1)) \
                     .reshape(m * ho * wo, c_out)
            cols = cols_for(lo, hi)
            dw += (gmat.T @ cols).reshape(w.shape)
            db += gmat.sum(axis=0)
            if need_dx:
                gc = g[lo:hi] if q >= 0 else g[lo:hi, :, -q:q or None, -q:q or None]
                gpad = np.pad(gc, ((0, 0), (0, 0), (max(q, 0),) * 2, (max(q, 0),) * 2))
                colg = _im2col(gpad, k)
                dx[lo:hi] = (colg @ wflip).reshape(m, h, wd, c_in) \
                    .transpose(0, 3, 1, 2)
        _accumulate(w, dw)
        _accumulate(b, db)
        if need_dx:
            _accumulate(x, dx)

    if _needs_grad(x, w, b):
        out = Tensor(out_data, parents=(x, w, b), backward=bw)
    else:
        out = Tensor(out_data)
    return reshape(out, out.shape[1:]) if squeeze else out


def maxpool2d(x, kernel=2, stride=2):
    """2x2/stride-2 max pooling; gradient goes to the first maximal cell
    in row-major window order."""
    if kernel != 2 or stride != 2:
        raise ShapeError("only kernel=2, stride=2 pooling is supported")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5) \
                    .reshape(n, c, ho, wo, 4)
    idx = np.argmax(windows, axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def bw(g):
        dwin = np.zeros((n, c, ho, wo, 4), dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    out = Tensor(out_data, parents=(x,), backward=bw) if _needs_grad(x) else Tensor(out_data)
    return reshape(out, out.shape[1:]) if squeeze else out
