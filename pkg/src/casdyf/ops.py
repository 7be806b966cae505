"""Differentiable numeric kernels on NCHW tensors.

Each op computes its forward result with numpy and registers an explicit
backward rule through :func:`casdyf.tensor.make_result`.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from typing import Optional, Sequence

import numpy as np

from . import fft
from .tensor import Tensor, as_tensor, get_dtype, make_result

# ------------------------------------------------------------- MAC counting
_MAC_COUNTER: Optional[Counter] = None


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts per category while active.

    Categories: ``conv`` (conv2d), ``dynamic`` (per-sample depthwise filtering),
    ``norm`` (batch-norm scale/shift, one per element) and ``gate`` (tensor x
    tensor elementwise products, one per output element).
    """
    global _MAC_COUNTER
    old = _MAC_COUNTER
    _MAC_COUNTER = Counter()
    try:
        yield _MAC_COUNTER
    finally:
        _MAC_COUNTER = old


def _count(kind: str, n: int) -> None:
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[kind] += int(n)


# ------------------------------------------------------------- kink record
# Piecewise ops (relu, abs, channel max) append their branch pattern here while
# a recording is active; the gradient checker uses it to spot finite-difference
# stencils that straddle a kink.
_KINKS: Optional[list] = None


@contextlib.contextmanager
def record_kinks():
    global _KINKS
    old = _KINKS
    _KINKS = []
    try:
        yield _KINKS
    finally:
        _KINKS = old


def _kink(pattern: np.ndarray) -> None:
    if _KINKS is not None:
        _KINKS.append(pattern)


# ---------------------------------------------------------------- helpers
def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check4(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected a rank-4 NCHW tensor, got shape {x.shape}")


# ------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    both = isinstance(a, Tensor) and isinstance(b, Tensor)
    a, b = _lift(a), _lift(b)
    out = a.data * b.data
    if both:
        _count("gate", out.size)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _kink(mask)

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    _kink(s)

    def backward(g):
        return (g * s,)

    return make_result(np.abs(x.data), (x,), backward, "abs")


# -------------------------------------------------------------- reductions
def sum_(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def backward(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H x W, giving an (N, C, 1, 1) tensor."""
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "gap")


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=1, keepdims=True), (x,), backward, "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    idx = x.data.argmax(axis=1)[:, None]
    _kink(idx)
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result(out, (x,), backward, "channel_max")


# ---------------------------------------------------------------- shaping
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ValueError("concat: empty input list")
    ref = xs[0].shape
    for i, x in enumerate(xs):
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ValueError(f"concat: input {i} has shape {x.shape}, incompatible with {ref} off axis {axis}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), (x,), backward, "channel_slice")


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Pad H and W by ``pad`` on each side, reflect (edge excluded) or zero."""
    _check4(x, "pad2d")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    if mode == "reflect":
        if pad >= h or pad >= w:
            raise ValueError(f"pad2d: reflect padding {pad} needs H and W > {pad}, got H={h}, W={w}")
        out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    elif mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        raise ValueError(f"pad2d: unknown padding mode {mode!r}")

    def backward(g):
        if mode == "zero":
            return (g[:, :, pad:pad + h, pad:pad + w].copy(),)
        g = _fold_reflect(g, pad, axis=2)
        g = _fold_reflect(g, pad, axis=3)
        return (g,)

    return make_result(out, (x,), backward, f"pad_{mode}")


def _fold_reflect(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    size = g.shape[-1] - 2 * pad
    inner = g[..., pad:pad + size].copy()
    # padded index j < pad mirrors source index pad - j; right side mirrors size - 2 - j
    inner[..., np.arange(pad, 0, -1)] += g[..., :pad]
    inner[..., np.arange(size - 2, size - 2 - pad, -1)] += g[..., pad + size:]
    return np.moveaxis(inner, -1, axis)


# ------------------------------------------------------------ convolution
def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: str = "reflect",
    pad: Optional[int] = None,
) -> Tensor:
    """2-D convolution (cross-correlation) on NCHW input.

    ``pad`` defaults to ``dilation * (k - 1) // 2`` which keeps the spatial size
    at stride 1.
    """
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (Cout, Cin/groups, k, k), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"conv2d: weight in-channel dim {cin_g} does not match input channels {cin} / groups {groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match out channels {cout}")
    k = kh
    if pad is None:
        pad = dilation * (k - 1) // 2
    xp = pad2d(x, pad, padding)
    hp, wp = xp.shape[2:]
    ho = (hp - dilation * (k - 1) - 1) // stride + 1
    wo = (wp - dilation * (k - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {k} dilation {dilation} pad {pad}")
    out = _conv_core(xp, weight, bias, stride, dilation, groups, ho, wo)
    return out


def _conv_core(xp, weight, bias, stride, dilation, groups, ho, wo):
    n, cin, hp, wp = xp.shape
    cout, cin_g, k, _ = weight.shape
    kk = k * k
    cout_g = cout // groups
    L = ho * wo
    xd = xp.data
    if k == 1 and stride == 1:
        cols = xd.reshape(n, groups, cin_g, L)
    else:
        cols = np.empty((n, cin, kk, ho, wo), dtype=xd.dtype)
        for a in range(k):
            for b in range(k):
                r0, c0 = a * dilation, b * dilation
                cols[:, :, a * k + b] = xd[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                                           c0:c0 + stride * (wo - 1) + 1:stride]
        cols = cols.reshape(n, groups, cin_g * kk, L)
    wmat = weight.data.reshape(groups, cout_g, cin_g * kk)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _count("conv", n * cout * cin_g * kk * ho * wo)

    def backward(g):
        g4 = g.reshape(n, groups, cout_g, L)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g4, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if xp.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, 1, 2), g4)
            if k == 1 and stride == 1:
                gx = gcols.reshape(n, cin, hp, wp)
            else:
                gcols = gcols.reshape(n, cin, kk, ho, wo)
                gx = np.zeros(xp.shape, dtype=g.dtype)
                for a in range(k):
                    for b in range(k):
                        r0, c0 = a * dilation, b * dilation
                        gx[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                           c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, :, a * k + b]
        return gx, gw, gb

    parents = (xp, weight) if bias is None else (xp, weight, bias)
    return make_result(out.astype(xd.dtype, copy=False), parents, backward, "conv2d")


def dynamic_filter(x: Tensor, kernels: Tensor, padding: str = "reflect") -> Tensor:
    """Depthwise convolution with a separate k x k kernel per (sample, channel)."""
    _check4(x, "dynamic_filter")
    if kernels.ndim != 4 or kernels.shape[:2] != x.shape[:2]:
        raise ValueError(
            f"dynamic_filter: kernels shape {kernels.shape} must be (N, C, k, k) matching input {x.shape[:2]}"
        )
    k = kernels.shape[2]
    if kernels.shape[3] != k or k % 2 == 0:
        raise ValueError(f"dynamic_filter: kernels must be square with odd size, got {kernels.shape[2:]}")
    n, c, h, w = x.shape
    xp = pad2d(x, k // 2, padding)
    xd, kd = xp.data, kernels.data
    out = np.zeros(x.shape, dtype=xd.dtype)
    for a in range(k):
        for b in range(k):
            out += kd[:, :, a, b, None, None] * xd[:, :, a:a + h, b:b + w]
    _count("dynamic", n * c * k * k * h * w)

    def backward(g):
        gk = np.empty(kd.shape, dtype=g.dtype) if kernels.requires_grad else None
        gx = np.zeros(xd.shape, dtype=g.dtype) if xp.requires_grad else None
        for a in range(k):
            for b in range(k):
                window = xd[:, :, a:a + h, b:b + w]
                if gk is not None:
                    gk[:, :, a, b] = (g * window).sum(axis=(2, 3))
                if gx is not None:
                    gx[:, :, a:a + h, b:b + w] += g * kd[:, :, a, b, None, None]
        return gx, gk

    return make_result(out, (xp, kernels), backward, "dynamic_filter")


# ---------------------------------------------------------- normalization
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    _check4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm: state has length {gamma.shape[0]}, input has {c} channels")
    m = n * h * w
    xd = x.data
    if training:
        if m < 2:
            raise ValueError(f"batch_norm: train mode needs N*H*W >= 2, got {m}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    _count("norm", xd.size)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def softmax(x: Tensor, axis: int = 1, group: Optional[int] = None) -> Tensor:
    """Softmax along ``axis``; with ``group`` the axis is cut into contiguous
    groups of that length, each normalized independently."""
    d = x.data
    shape = d.shape
    ax = axis % d.ndim
    if group is not None:
        if group < 1 or shape[ax] % group:
            raise ValueError(f"softmax: axis length {shape[ax]} not divisible into groups of {group}")
        d = d.reshape(shape[:ax] + (shape[ax] // group, group) + shape[ax + 1:])
        red = ax + 1
    else:
        red = ax
    z = d - d.max(axis=red, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=red, keepdims=True)

    def backward(g):
        gg = g.reshape(y.shape)
        gx = y * (gg - (gg * y).sum(axis=red, keepdims=True))
        return (gx.reshape(shape),)

    return make_result(y.reshape(shape), (x,), backward, "softmax")


# ------------------------------------------------------------------ resize
def _interp_matrix(n_in: int, scale: float, dtype) -> np.ndarray:
    """Bilinear (align_corners=False) interpolation matrix, shape (n_out, n_in)."""
    n_out = int(round(n_in * scale))
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) / scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize(x: Tensor, scale: float) -> Tensor:
    """Bilinear resize by 0.5 or 2 (align_corners=False)."""
    _check4(x, "resize")
    n, c, h, w = x.shape
    if scale not in (0.5, 2, 2.0):
        raise ValueError(f"resize: scale must be 0.5 or 2, got {scale}")
    if scale == 0.5 and (h % 2 or w % 2):
        raise ValueError(f"resize: downscale needs even H and W, got {h}x{w}")
    mh = _interp_matrix(h, scale, x.dtype)
    mw = _interp_matrix(w, scale, x.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), backward, f"resize_x{scale}")


# ---------------------------------------------------------------- spectral
class ComplexSpectrum:
    """Real and imaginary planes of a 2-D DFT, each an (N, C, H, W) tensor."""

    __slots__ = ("real", "imag")

    def __init__(self, real: Tensor, imag: Tensor):
        if real.shape != imag.shape:
            raise ValueError(f"ComplexSpectrum: real {real.shape} and imag {imag.shape} differ")
        self.real = real
        self.imag = imag

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real.data, self.imag.data)


def dft2(x: Tensor) -> ComplexSpectrum:
    """Unnormalized 2-D DFT over H and W; differentiable w.r.t. ``x``."""
    h, w = x.shape[-2:]
    z = fft.fft2(x.data.astype(np.float64))
    dt = x.dtype

    def back_real(g):
        return (np.real(h * w * fft.ifft2(g.astype(np.float64))).astype(dt),)

    def back_imag(g):
        return (np.real(h * w * fft.ifft2(1j * g.astype(np.float64))).astype(dt),)

    re = make_result(np.ascontiguousarray(z.real).astype(dt), (x,), back_real, "dft2_real")
    im = make_result(np.ascontiguousarray(z.imag).astype(dt), (x,), back_imag, "dft2_imag")
    return ComplexSpectrum(re, im)


def idft2(spec: ComplexSpectrum) -> Tensor:
    """Inverse of :func:`dft2` (real part); not differentiable."""
    z = fft.ifft2(spec.real.data.astype(np.float64) + 1j * spec.imag.data.astype(np.float64))
    return Tensor(np.real(z), dtype=spec.real.dtype)
