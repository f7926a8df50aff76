"""Dense forward operators and their hand-written gradients.

Feature maps are channels-last ``(b, h, w, c)`` arrays. Every forward op
has a matching ``*_backward`` that takes the upstream gradient plus whatever
the forward consumed and returns gradients in the same order as the forward
arguments. All functions preserve the dtype of their inputs; run in float64
when checking gradients.
"""

from functools import lru_cache
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ParameterError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# affine


def affine(x, W, b):
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError("affine inner dims disagree", ("x", x.shape), ("W", W.shape))
    if b.shape != (W.shape[1],):
        raise ShapeError("affine bias does not match W", ("b", b.shape), ("W", W.shape))
    return x @ W + b


def affine_backward(dout, x, W):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = dout @ W.T
    dW = x2.T @ d2
    db = d2.sum(axis=0)
    return dx, dW, db


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, k, stride, pad):
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel", ("x", x.shape), ("k", k.shape))
    if x.shape[3] != k.shape[2]:
        raise ShapeError("conv2d channel mismatch", ("x", x.shape), ("k", k.shape))
    if stride < 1 or pad < 0:
        raise ParameterError(f"invalid stride={stride} / pad={pad}")
    hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
    if k.shape[0] > hp or k.shape[1] > wp:
        raise ShapeError("kernel larger than padded input", ("x_padded", (x.shape[0], hp, wp, x.shape[3])), ("k", k.shape))


def conv_output_size(n, kernel, stride, pad):
    return (n + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``x`` into a ``(b*oh*ow, kh*kw*c)`` patch matrix (tap-major)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, oh, ow = win.shape[:3]
    # (b, oh, ow, c, kh, kw) -> (b, oh, ow, kh, kw, c)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * oh * ow, -1), (b, oh, ow)


def conv2d(x, k, stride=1, pad=0, cols=None):
    """Cross-correlation of ``x (b,h,w,cin)`` with ``k (kh,kw,cin,cout)``.

    Pass ``cols`` (from :func:`im2col`) to reuse an unfolded input.
    """
    _check_conv(x, k, stride, pad)
    kh, kw, cin, cout = k.shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        return x @ k[0, 0]
    if cols is None:
        cols, (b, oh, ow) = im2col(x, kh, kw, stride, pad)
    else:
        b = x.shape[0]
        oh = conv_output_size(x.shape[1], kh, stride, pad)
        ow = conv_output_size(x.shape[2], kw, stride, pad)
    out = cols @ k.reshape(kh * kw * cin, cout)
    return out.reshape(b, oh, ow, cout)


def conv2d_backward(dout, x, k, stride=1, pad=0, cols=None):
    """Return ``(dx, dk)`` for :func:`conv2d`."""
    kh, kw, cin, cout = k.shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        dk = (x.reshape(-1, cin).T @ dout.reshape(-1, cout)).reshape(k.shape)
        return dout @ k[0, 0].T, dk
    if cols is None:
        cols, _ = im2col(x, kh, kw, stride, pad)
    d2 = dout.reshape(-1, cout)
    dk = (cols.T @ d2).reshape(k.shape)
    dx = _col2im(d2 @ k.reshape(kh * kw * cin, cout).T, x.shape, kh, kw, stride, pad, dout.shape)
    return dx, dk


def _col2im(dcols, xshape, kh, kw, stride, pad, oshape):
    b, h, w, c = xshape
    _, oh, ow, _ = oshape
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    dcols = dcols.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        return dxp[:, pad:pad + h, pad:pad + w, :]
    return dxp


def conv_transpose2d(x, k, stride=1):
    """Adjoint of ``conv2d(., k, stride, pad=0)``.

    ``x`` is ``(b, h, w, cout)`` and ``k`` is ``(kh, kw, cin, cout)``; the
    result has ``cin`` channels and spatial extent ``(h-1)*stride + kh``.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[3]:
        raise ShapeError("conv_transpose2d channel mismatch", ("x", x.shape), ("k", k.shape))
    b, h, w, _ = x.shape
    kh, kw, cin, cout = k.shape
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    # one matmul for all taps: (b*h*w, cout) @ (cout, kh*kw*cin)
    taps = (x.reshape(-1, cout) @ k.reshape(kh * kw * cin, cout).T).reshape(b, h, w, kh, kw, cin)
    out = np.zeros((b, oh, ow, cin), dtype=np.result_type(x, k))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * h:stride, j:j + stride * w:stride, :] += taps[:, :, :, i, j, :]
    return out


def conv_transpose2d_backward(dout, x, k, stride=1):
    """Return ``(dx, dk)`` for :func:`conv_transpose2d`."""
    kh, kw, cin, cout = k.shape
    cols, _ = im2col(dout, kh, kw, stride, 0)
    dx = (cols @ k.reshape(kh * kw * cin, cout)).reshape(x.shape)
    dk = (cols.T @ x.reshape(-1, cout)).reshape(k.shape)
    return dx, dk


# --------------------------------------------------------------------------
# batch normalisation


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels, momentum=0.1, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batchnorm2d(x, gamma, beta, eps=1e-5, mode="train", state=None):
    """Per-channel normalisation of an NHWC tensor.

    Returns ``(out, cache)``. In train mode the batch statistics are used and
    ``state`` (if given) has its running statistics updated in place.
    """
    if eps <= 0:
        raise ParameterError(f"batchnorm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm affine params do not match channels", ("x", x.shape), ("gamma", gamma.shape))
    if mode == "train":
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        xc = x - mean
        var = (xc * xc).mean(axis=axes)
        if state is not None:
            n = x.size // c
            unbiased = var * (n / max(n - 1, 1))
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        if state is None:
            raise ParameterError("eval-mode batchnorm needs running statistics")
        mean, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)
        xc = x - mean
    else:
        raise ParameterError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, mode)


def batchnorm2d_backward(dout, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    if mode == "eval":
        return dxhat * inv_std, dgamma, dbeta
    n = dout.size // dout.shape[-1]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise nonlinearities


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(dout, x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def softmax_channel(x):
    """Softmax over the channel axis of a ``(c,h,w)`` or ``(b,c,h,w)`` tensor."""
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def log_softmax_channel(x):
    z = x - x.max(axis=-3, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-3, keepdims=True))


def softmax_channel_backward(dout, p):
    """Gradient through :func:`softmax_channel` given its output ``p``."""
    return p * (dout - (dout * p).sum(axis=-3, keepdims=True))


# --------------------------------------------------------------------------
# resampling


def _interp_coords(n_in, n_out):
    """Left neighbour index and fractional offset for corner-anchored sampling."""
    if n_in == 1 or n_out == 1:
        return np.zeros(n_out, dtype=int), np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    return i0, pos - i0


@lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, dtype_name):
    """Row-stochastic ``(n_out, n_in)`` matrix of the same interpolation."""
    R = np.zeros((n_out, n_in), dtype=np.float64)
    i0, frac = _interp_coords(n_in, n_out)
    rows = np.arange(n_out)
    R[rows, i0] = 1.0 - frac
    if n_in > 1:
        R[rows, i0 + 1] += frac
    R = R.astype(dtype_name)
    R.setflags(write=False)
    return R


def _lerp_axis(x, n_out, axis):
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    i0, frac = _interp_coords(n_in, n_out)
    x0 = np.take(x, i0, axis=axis)
    if n_in == 1:
        return x0
    x1 = np.take(x, i0 + 1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.astype(np.result_type(x, np.float32)).reshape(shape)
    # x0 + f*(x1-x0) keeps constant fields exactly constant
    return x0 + frac * (x1 - x0)


def bilinear_resize(x, out_h, out_w, axes=(-2, -1)):
    """Corner-anchored bilinear resize of the two spatial ``axes`` of ``x``.

    Defaults suit ``(h,w)`` / ``(c,h,w)`` maps; use ``axes=(1, 2)`` for NHWC.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target must be >= 1, got {(out_h, out_w)}")
    ah, aw = (a % x.ndim for a in axes)
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if (x.shape[ah], x.shape[aw]) == (out_h, out_w):
        return x.copy()
    return _lerp_axis(_lerp_axis(x, out_h, ah), out_w, aw)


def bilinear_resize_backward(dout, in_h, in_w, axes=(-2, -1)):
    """Adjoint of :func:`bilinear_resize` (gradient w.r.t. its input)."""
    ah, aw = (a % dout.ndim for a in axes)
    out_h, out_w = dout.shape[ah], dout.shape[aw]
    if (in_h, in_w) == (out_h, out_w):
        return dout.copy()
    dt = dout.dtype.name
    Rh = _interp_matrix(in_h, out_h, dt)
    Rw = _interp_matrix(in_w, out_w, dt)
    g = np.moveaxis(np.tensordot(Rh.T, dout, axes=(1, ah)), 0, ah)
    g = np.moveaxis(np.tensordot(Rw.T, g, axes=(1, aw)), 0, aw)
    return g


def gaussian_kernel1d(sigma):
    """Normalised 1-D Gaussian taps on ``[-r, r]`` with ``r = ceil(3 sigma)``."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    r = int(math.ceil(3 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(t * t) / (2 * sigma * sigma))
    return w / w.sum()


def _blur_axis(x, w, axis):
    r = (len(w) - 1) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    # symmetric padding repeats the edge sample (d c b a | a b c d)
    xp = np.pad(x, pad, mode="symmetric")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for t, wt in enumerate(w):
        out += wt * np.take(xp, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(x, sigma):
    """Separable Gaussian smoothing over the last two axes."""
    w = gaussian_kernel1d(sigma).astype(np.result_type(x, np.float32))
    return _blur_axis(_blur_axis(x, w, x.ndim - 2), w, x.ndim - 1)
