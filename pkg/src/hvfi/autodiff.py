"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Implements exactly the operator set the interpolation model needs: elementwise
arithmetic, reductions, (batched) matmul, conv2d, linear, layer norm,
activations, softmax, zero-padding/slicing/reshaping, bilinear resize and
bilinear grid sampling. Single precision by default; gradient checking runs
the same ops in double precision.

Set HVFI_CHECK_FINITE=1 to assert after every op that no NaN/Inf was produced.
"""

from __future__ import annotations

import os
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_CHECK_FINITE = os.environ.get("HVFI_CHECK_FINITE", "") == "1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tape:
    """Ordered record of executed ops; execution order is topological."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []  # list of (output Tensor, backward fn(grad ndarray))

    def record(self, out, backward_fn):
        self.nodes.append((out, backward_fn))

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def __len__(self):
        return len(self.nodes)


_tape_stack: list[Tape] = []
_grad_enabled = True


def _push_tape(t):
    _tape_stack.append(t)


def _pop_tape(t):
    assert _tape_stack and _tape_stack[-1] is t
    _tape_stack.pop()


def _active_tape() -> Tape:
    # Ops auto-create a tape so small scripts/tests need no ceremony;
    # backward() discards it. Training loops use `with Tape():` per step.
    if not _tape_stack:
        _tape_stack.append(Tape())
    return _tape_stack[-1]


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = _grad_enabled and False  # keep linters quiet
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense array with optional gradient accumulation.

    Values are conceptually finite; HVFI_CHECK_FINITE=1 turns that into a
    hard assertion after every op. Data is immutable by convention once the
    tensor has entered a computation; only .grad mutates (accumulates).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- basic introspection -------------------------------------------------
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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _rg(*xs):
    return _grad_enabled and any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _make(out_data, needs_grad, backward_fn):
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by an op")
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    if needs_grad:
        _active_tape().record(out, backward_fn)
    return out


def _accum(t, g):
    if not (isinstance(t, Tensor) and t.requires_grad):
        return
    # np.ascontiguousarray would promote 0-d grads to shape (1,); avoid it.
    g = np.asarray(g, dtype=t.data.dtype)
    if not g.flags["C_CONTIGUOUS"]:
        g = np.ascontiguousarray(g).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss.

    Walks the active tape once, in reverse execution order. Grad contributions
    from multiple consumers accumulate additively.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not _tape_stack:
        raise RuntimeError("no tape recorded; nothing to differentiate")
    tape = _tape_stack[-1]
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)
            if not out.requires_grad:  # pragma: no cover - defensive
                out.grad = None
    # Implicit (auto-created) tapes are one-shot: drop so the next forward
    # pass starts clean. Explicit `with Tape()` scopes manage themselves.
    tape.nodes.clear()


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g, bd.shape))

    return _make(out, _rg(a, b), bwd)


def sub(a, b):
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g, bd.shape))

    return _make(out, _rg(a, b), bwd)


def neg(a):
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, _rg(a), bwd)


def mul(a, b):
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g * ad, bd.shape))

    return _make(out, _rg(a, b), bwd)


def div(a, b):
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g / bd, ad.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(out, _rg(a, b), bwd)


def power(a, p):
    """a ** p for a scalar (python float) exponent."""
    p = float(p)
    out = a.data ** p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, _rg(a), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, _rg(a), bwd)


def absolute(a):
    out = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, _rg(a), bwd)


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out)

    return _make(out, _rg(a), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(out), _rg(a), bwd)


def mean_(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(out.size, 1)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / denom)

    return _make(np.asarray(out), _rg(a), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, _rg(a), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(out, _rg(a), bwd)


def getitem(a, idx):
    out = a.data[idx].copy()

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _make(out, _rg(a), bwd)


def concat(tensors, axis=0):
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if isinstance(t, Tensor):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, _rg(*tensors), bwd)


def pad2d(a, pads):
    """Zero-pad the last two axes; pads = (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    out = np.pad(a.data, width)
    sl = (Ellipsis,
          slice(pt, out.shape[-2] - pb or None),
          slice(pl, out.shape[-1] - pr or None))

    def bwd(g):
        _accum(a, g[sl])

    return _make(out, _rg(a), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    ad, bd = _data(a), _data(b)
    out = np.matmul(ad, bd)

    def bwd(g):
        if isinstance(a, Tensor):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accum(a, _unbroadcast(ga, ad.shape))
        if isinstance(b, Tensor):
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            _accum(b, _unbroadcast(gb, bd.shape))

    return _make(out, _rg(a, b), bwd)


def linear(x, weight, bias=None):
    """Affine map per row: out = x @ weight.T + bias."""
    xd, wd = _data(x), _data(weight)
    if xd.shape[-1] != wd.shape[-1]:
        raise ShapeError(
            f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + _data(bias)

    def bwd(g):
        if isinstance(x, Tensor):
            _accum(x, g @ wd)
        if isinstance(weight, Tensor):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xd.reshape(-1, xd.shape[-1])
            _accum(weight, g2.T @ x2)
        if bias is not None and isinstance(bias, Tensor):
            _accum(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, _rg(x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# activations / normalization
# ---------------------------------------------------------------------------

def relu(a):
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(out, _rg(a), bwd)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, _rg(a), bwd)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = a.data * phi_cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, g * (phi_cdf + a.data * pdf))

    return _make(out, _rg(a), bwd)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)

    return _make(out, _rg(a), bwd)


def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Normalize to zero mean / unit variance along one axis, then affine.

    gamma/beta are 1-D of the normalized axis length.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = _data(x)
    ax = axis % xd.ndim
    n = xd.shape[ax]
    gd, bd = _data(gamma), _data(beta)
    if gd.shape != (n,) or bd.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta {gd.shape}/{bd.shape} must be ({n},) for input {xd.shape}")
    bshape = [1] * xd.ndim
    bshape[ax] = n
    gb = gd.reshape(bshape)
    bb = bd.reshape(bshape)

    mu = xd.mean(axis=ax, keepdims=True)
    var = xd.var(axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gb * xhat + bb

    def bwd(g):
        if isinstance(gamma, Tensor):
            red = tuple(i for i in range(xd.ndim) if i != ax)
            _accum(gamma, (g * xhat).sum(axis=red))
        if isinstance(beta, Tensor):
            red = tuple(i for i in range(xd.ndim) if i != ax)
            _accum(beta, g.sum(axis=red))
        if isinstance(x, Tensor):
            dxhat = g * gb
            m1 = dxhat.mean(axis=ax, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(out, _rg(x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _zero_pad_hw(xd, p):
    if p == 0:
        return xd
    n, c, h, w = xd.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=xd.dtype)
    out[:, :, p:p + h, p:p + w] = xd
    return out


def _im2col(xp, k, stride):
    # xp: (n, c, hp, wp) padded input -> (n, oh, ow, c*k*k)
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # view: (n, c, oh, ow, k, k)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(
        view.shape[0], view.shape[2] * view.shape[3], -1)
    return cols, view.shape[2], view.shape[3]


def _conv_fwd_data(xd, wd, stride, padding):
    n, c = xd.shape[:2]
    co, ci, k, _ = wd.shape
    xp = _zero_pad_hw(xd, padding)
    cols, oh, ow = _im2col(xp, k, stride)
    out = cols.reshape(n * oh * ow, ci * k * k) @ wd.reshape(co, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))


def _conv1x1(x, weight, bias, xd, wd):
    n, c, h, w = xd.shape
    co = wd.shape[0]
    wmat = wd.reshape(co, c)
    x2 = xd.reshape(n, c, h * w)
    out = np.matmul(wmat, x2).reshape(n, co, h, w)
    if bias is not None:
        out = out + _data(bias).reshape(1, co, 1, 1)

    def bwd(g):
        g2 = g.reshape(n, co, h * w)
        if isinstance(weight, Tensor):
            gw = np.einsum("nop,ncp->oc", g2, x2, optimize=True)
            _accum(weight, gw.reshape(wd.shape))
        if bias is not None and isinstance(bias, Tensor):
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if isinstance(x, Tensor):
            _accum(x, np.matmul(wmat.T, g2).reshape(xd.shape))

    return _make(out, _rg(x, weight, bias), bwd)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding (deep-learning convention)."""
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D tensors, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    co, ci, k, k2 = wd.shape
    if c != ci or k != k2:
        raise ShapeError(
            f"conv2d: input shape {xd.shape} incompatible with weight shape {wd.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias, xd, wd)

    xp = _zero_pad_hw(xd, padding)
    cols, oh, ow = _im2col(xp, k, stride)
    cols2 = cols.reshape(n * oh * ow, ci * k * k)
    out = cols2 @ wd.reshape(co, -1).T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))
    if bias is not None:
        bdat = _data(bias)
        if bdat.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bdat.shape} != ({co},)")
        out += bdat.reshape(1, co, 1, 1)

    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        if isinstance(weight, Tensor):
            _accum(weight, (g2.T @ cols2).reshape(wd.shape))
        if bias is not None and isinstance(bias, Tensor):
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if isinstance(x, Tensor):
            if stride == 1 and k - 1 - padding >= 0:
                # transposed conv as a forward conv with rotated weights (BLAS path)
                w_rot = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _conv_fwd_data(g, w_rot, 1, k - 1 - padding)
                _accum(x, gx)
            else:
                dcols = (g2 @ wd.reshape(co, -1)).reshape(n, oh, ow, ci, k, k)
                gxp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
                src = _col_scatter_index(ci, hp, wp, k, stride, oh, ow)
                flat = dcols.transpose(0, 3, 4, 5, 1, 2).reshape(n, -1)
                for b in range(n):
                    gxp[b] = np.bincount(src, weights=flat[b],
                                         minlength=ci * hp * wp).reshape(ci, hp, wp)
                gx = gxp[:, :, padding:hp - padding or None, padding:wp - padding or None]
                _accum(x, gx)

    return _make(out, _rg(x, weight, bias), bwd)


@lru_cache(maxsize=64)
def _col_scatter_index(ci, hp, wp, k, stride, oh, ow):
    # flat padded-index for each (ci, ky, kx, oy, ox)
    rows = np.arange(oh) * stride + np.arange(k)[:, None]  # (k, oh)
    cols = np.arange(ow) * stride + np.arange(k)[:, None]  # (k, ow)
    base = np.arange(ci)[:, None, None, None, None] * (hp * wp)
    idx = (base
           + rows[None, :, None, :, None] * wp
           + cols[None, None, :, None, :])
    return np.ascontiguousarray(idx.reshape(-1))  # (ci*k*k*oh*ow,)


# ---------------------------------------------------------------------------
# bilinear resize / sampling
# ---------------------------------------------------------------------------

def _resize_matrix(out_size, in_size, dtype):
    """1-D align-corners-false interpolation matrix (out_size, in_size)."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        i0 = min(i0, in_size - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        if f > 0.0:
            m[o, i0 + 1] += f
    return m


def bilinear_resize(x, factor):
    """Bilinear up/down-sampling by exactly 2 or 0.5 (align-corners-false)."""
    if factor not in (0.5, 2, 2.0):
        raise ValueError(f"unsupported resize factor {factor}; expected 0.5 or 2")
    xd = _data(x)
    h, w = xd.shape[-2], xd.shape[-1]
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if oh < 1 or ow < 1:
        raise ShapeError(f"resize of {(h, w)} by {factor} collapses to zero size")
    r = _resize_matrix(oh, h, np.float64 if xd.dtype == np.float64 else np.float32)
    c = _resize_matrix(ow, w, r.dtype)
    lead = xd.shape[:-2]
    x3 = xd.reshape(-1, h, w)
    out = np.einsum("ij,bjl,kl->bik", r, x3, c, optimize=True).reshape(*lead, oh, ow)

    def bwd(g):
        g3 = g.reshape(-1, oh, ow)
        gx = np.einsum("ij,bik,kl->bjl", r, g3, c, optimize=True)
        _accum(x, gx.reshape(xd.shape))

    return _make(out, _rg(x), bwd)


def bilinear_sample(x, coords_x, coords_y):
    """Sample x at fractional pixel coordinates with zero padding outside.

    x: (n, c, h, w); coords_x/coords_y: arbitrary common shape S (pixel units,
    x along width, y along height). Output: (n, c, *S). Differentiable w.r.t.
    x and both coordinate fields.
    """
    xd = _data(x)
    cxd, cyd = _data(coords_x), _data(coords_y)
    if cxd.shape != cyd.shape:
        raise ShapeError(f"coordinate shapes differ: {cxd.shape} vs {cyd.shape}")
    n, c, h, w = xd.shape

    x0 = np.floor(cxd)
    y0 = np.floor(cyd)
    fx = cxd - x0
    fy = cyd - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    vals = []
    weights = []  # bilinear weight with the out-of-bounds mask folded in
    masks = []
    idxs = []
    wxs = (1 - fx, fx)
    wys = (1 - fy, fy)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            m = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            vals.append(xd[:, :, yi_c, xi_c])  # (n, c, *S), unmasked
            weights.append(wxs[dx] * wys[dy] * m)
            masks.append(m)
            idxs.append(yi_c * w + xi_c)
    out = sum(wt * v for wt, v in zip(weights, vals))

    def bwd(g):
        if isinstance(x, Tensor):
            chan_off = (np.arange(n * c) * (h * w)).reshape(n, c, *([1] * cxd.ndim))
            contribs = [(g * wt).reshape(-1) for wt in weights]
            full_idxs = [np.broadcast_to(chan_off + idx, (n, c) + idx.shape).reshape(-1)
                         for idx in idxs]
            gx_flat = np.bincount(np.concatenate(full_idxs),
                                  weights=np.concatenate(contribs),
                                  minlength=n * c * h * w)
            _accum(x, gx_flat.reshape(n, c, h, w).astype(g.dtype, copy=False))
        if isinstance(coords_x, Tensor) or isinstance(coords_y, Tensor):
            # the masked corner values (zero outside the image)
            v00, v10, v01, v11 = (v * m for v, m in zip(vals, masks))
            if isinstance(coords_x, Tensor):
                dox = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
                _accum(coords_x, (g * dox).sum(axis=(0, 1)))
            if isinstance(coords_y, Tensor):
                doy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
                _accum(coords_y, (g * doy).sum(axis=(0, 1)))

    return _make(out, _rg(x, coords_x, coords_y), bwd)
