"""Differentiable operation set.

Every function takes :class:`Tensor` operands (plain arrays and scalars
are wrapped as constants) and returns a new tensor. Backward rules work
on raw numpy arrays.

Layout conventions: feature maps are N x C x H x W, token sequences are
N x L x C. Bilinear resampling uses the half-pixel (align_corners=False)
convention.
"""

from __future__ import annotations

import builtins
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, as_tensor, make_op


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_op("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_op("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_op("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# --- activations ------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_op("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_op("silu", x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def backward(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * d_inner),)

    return make_op("gelu", out, (x,), backward)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return make_op("softplus", out, (x,), lambda g: (g * _sigmoid(v),))


# --- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_op("mean", np.asarray(out), (x,), backward)


def amax(x, axis, keepdims=False) -> Tensor:
    """Maximum over ``axis``; gradient flows to the first maximal element."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    rest = tuple(a for a in range(x.ndim) if a not in axes)
    moved = np.transpose(x.data, rest + axes)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    kept_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape))
    if keepdims:
        out = out.reshape(kept_shape)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape + (1,)), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(rest + axes)),)

    return make_op("amax", np.ascontiguousarray(out), (x,), backward)


# --- shape manipulation -----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def expand(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return make_op("expand", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op("getitem", np.array(out), (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def roll(x, shift, axis) -> Tensor:
    x = as_tensor(x)
    return make_op("roll", np.roll(x.data, shift, axis=axis), (x,),
                   lambda g: (np.roll(g, tuple(-s for s in shift) if isinstance(shift, tuple) else -shift,
                                      axis=axis),))


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op("matmul", out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} and weight {weight.shape} do not conform")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data).reshape(lead + (weight.shape[1],))
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op("linear", out, inputs, backward)


# --- normalization / softmax -----------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", s, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", out, (x, gamma, beta), backward)


# --- convolution ------------------------------------------------------------

def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation. ``weight`` is (O, C/groups, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape} (groups={groups})")
    ho, wo = conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1
    wd = weight.data

    if groups == 1:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        og = o // groups
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
        depthwise = cg == 1 and og == 1
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + hspan:s, j:j + wspan:s]
                if depthwise:
                    out += xs * wd[:, 0, i, j][None, :, None, None]
                else:
                    out += np.einsum("ngchw,goc->ngohw", xs.reshape(n, groups, cg, ho, wo),
                                     wd[:, :, i, j].reshape(groups, og, cg)).reshape(n, o, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        if groups == 1:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hspan:s, j:j + wspan:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        else:
            og = o // groups
            gw = np.zeros_like(wd)
            gg = g.reshape(n, groups, og, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i:i + hspan:s, j:j + wspan:s]
                    if cg == 1 and og == 1:
                        gw[:, 0, i, j] = (g * xs).sum(axis=(0, 2, 3))
                        gxp[:, :, i:i + hspan:s, j:j + wspan:s] += g * wd[:, 0, i, j][None, :, None, None]
                    else:
                        wij = wd[:, :, i, j].reshape(groups, og, cg)
                        gw[:, :, i, j] = np.einsum("ngohw,ngchw->goc", gg,
                                                   xs.reshape(n, groups, cg, ho, wo)).reshape(o, cg)
                        gxp[:, :, i:i + hspan:s, j:j + wspan:s] += np.einsum(
                            "ngohw,goc->ngchw", gg, wij).reshape(n, c, ho, wo)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op("conv2d", np.ascontiguousarray(out), inputs, backward)


def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """Causal depthwise convolution along the sequence axis of N x L x C.

    ``weight`` is (C, k); the sequence is left-padded with k-1 zeros so
    output t only sees inputs at t-k+1..t.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, length, c = x.shape
    if weight.shape[0] != c:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} and weight {weight.shape} differ in channels")
    k = weight.shape[1]
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    wd = weight.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + length, :] * wd[:, j]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, j:j + length, :] += g * wd[:, j]
            gw[:, j] = (g * xp[:, j:j + length, :]).sum(axis=(0, 1))
        grads = [gxp[:, k - 1:, :], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return make_op("depthwise_conv1d", out, inputs, backward)


# --- pooling and resampling ------------------------------------------------

def _separable(name: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)
    return make_op(name, out, (x,),
                   lambda g: (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),))


def _pool_matrix(size: int, target: int) -> np.ndarray:
    m = np.zeros((target, size))
    for i in range(target):
        start = (i * size) // target
        stop = -((-(i + 1) * size) // target)
        m[i, start:stop] = 1.0 / (stop - start)
    return m


def adaptive_avg_pool2d(x, output_size) -> Tensor:
    """Average over fractional bins [floor(i*H/h), ceil((i+1)*H/h))."""
    x = as_tensor(x)
    ho, wo = output_size
    return _separable("adaptive_avg_pool2d", x, _pool_matrix(x.shape[2], ho), _pool_matrix(x.shape[3], wo))


def _bilinear_matrix(size: int, scale: int) -> np.ndarray:
    target = size * scale
    m = np.zeros((target, size))
    for i in range(target):
        src = builtins.max((i + 0.5) / scale - 0.5, 0.0)
        i0 = builtins.min(int(math.floor(src)), size - 1)
        i1 = builtins.min(i0 + 1, size - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def upsample_bilinear(x, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    return _separable("upsample_bilinear", x, _bilinear_matrix(x.shape[2], scale),
                      _bilinear_matrix(x.shape[3], scale))


def global_avg_pool2d(x) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def global_max_pool2d(x) -> Tensor:
    return amax(x, axis=(2, 3), keepdims=True)


def channel_mean(x) -> Tensor:
    return mean(x, axis=1, keepdims=True)


def channel_max(x) -> Tensor:
    return amax(x, axis=1, keepdims=True)


def max_pool2d(x, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn_, cc, rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_op("max_pool2d", np.ascontiguousarray(out), (x,), backward)
