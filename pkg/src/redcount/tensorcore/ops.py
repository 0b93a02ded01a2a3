"""Differentiable operations used by the counting network.

Convolution is cross-correlation with stride 1. Kernels of side
``FFT_MIN_KERNEL`` or larger are evaluated in the frequency domain, smaller ones
through im2col + GEMM. Both routes compute the same function; ``method`` forces
one of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .. import kernels
from .tensor import Tensor, as_tensor, record

FFT_MIN_KERNEL = 8


def _check_same_dtype(*arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) != 1:
        raise TypeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}; cast inputs first")


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# --------------------------------------------------------------------------- conv2d


def _flat_padded(xd, pad, k):
    """Zero-padded batch flattened per channel, with ``k - 1`` spare zeros at the end.

    Shifting by ``(i, j)`` is then a contiguous slice of each channel row, which
    makes im2col a sequence of block copies. Outputs are computed on the padded
    width and the ``k - 1`` spare columns are dropped afterwards.
    """
    b_n, c_n, h, w = xd.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if pad == 0 and k == 1:
        return np.ascontiguousarray(xd).reshape(b_n, c_n, h * w)
    buf = np.zeros((b_n, c_n, hp * wp + k - 1), dtype=xd.dtype)
    buf[:, :, :hp * wp].reshape(b_n, c_n, hp, wp)[:, :, pad:pad + h, pad:pad + w] = xd
    return buf


def _unfold(K, xflat_b, k, wp, n):
    return xflat_b[:, :n] if k == 1 else K.im2col(xflat_b, k, wp, n)


def _conv_gemm_forward(xd, w, k, pad):
    # one tall GEMM of all k*k weight slices against the flat input, then a
    # shifted sum of the k*k output blocks (no im2col buffer)
    K = kernels.get_backend()
    b_n, c_n, h, wdt = xd.shape
    hp, wp = h + 2 * pad, wdt + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    n = ho * wp
    o_n = w.shape[0]
    xflat = _flat_padded(xd, pad, k)
    wstack = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k * o_n, c_n)
    out = np.empty((b_n, o_n, ho, wo), dtype=xd.dtype)
    for b in range(b_n):
        z = wstack @ xflat[b]
        y = z[:, :n] if k == 1 else K.shift_sum(z, o_n, k, wp, n)
        out[b] = y.reshape(o_n, ho, wp)[:, :, :wo]
    return out


def _conv_gemm_backward(xd, w, k, pad, gy):
    b_n, c_n, h, wdt = xd.shape
    hp, wp = h + 2 * pad, wdt + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    n = ho * wp
    o_n = w.shape[0]
    xflat = _flat_padded(xd, pad, k)
    length = xflat.shape[2]
    # per-offset slices W_t^T, shape (k*k, C, O)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k, c_n, o_n)
    gw = np.zeros((k * k, o_n, c_n), dtype=w.dtype)
    gx = np.empty_like(xd)
    g_ext = np.zeros((o_n, ho, wp), dtype=gy.dtype)
    gflat = np.empty((c_n, length), dtype=gy.dtype)
    for b in range(b_n):
        g_ext[:, :, :wo] = gy[b]
        g2 = g_ext.reshape(o_n, n)
        xb = xflat[b]
        gflat.fill(0)
        # every offset t is a zero-copy shifted view of the flat input / gradient
        for t in range(k * k):
            off = (t // k) * wp + t % k
            gw[t] += g2 @ xb[:, off:off + n].T
            gflat[:, off:off + n] += wt[t] @ g2
        gx[b] = gflat[:, :hp * wp].reshape(c_n, hp, wp)[:, pad:pad + h, pad:pad + wdt]
    gw = gw.reshape(k, k, o_n, c_n).transpose(2, 3, 0, 1)
    return gx, np.ascontiguousarray(gw)


def _fft_shape(hp, wp):
    return sfft.next_fast_len(hp, real=True), sfft.next_fast_len(wp, real=True)


def _kernel_spectrum(w, ph, pw):
    # flipped kernel, zero padded to (ph, pw); transform the k short rows first
    flipped = w[:, :, ::-1, ::-1]
    return sfft.fft(sfft.rfft(flipped, n=pw, axis=-1), n=ph, axis=-2)


def _conv_fft_forward(xp, w, k):
    K = kernels.get_backend()
    b_n, c_n, hp, wp = xp.shape
    o_n = w.shape[0]
    ph, pw = _fft_shape(hp, wp)
    xf = sfft.rfft2(xp, s=(ph, pw))
    wf = _kernel_spectrum(w, ph, pw)
    fshape = xf.shape[-2:]
    yf = K.spectral_mix(wf.reshape(o_n, c_n, -1), xf.reshape(b_n, c_n, -1))
    y = sfft.irfft2(yf.reshape(b_n, o_n, *fshape), s=(ph, pw))
    out = np.ascontiguousarray(y[:, :, k - 1:hp, k - 1:wp])
    return out, (xf, wf)


def _conv_fft_backward(xp_shape, k, spectra, gy):
    K = kernels.get_backend()
    xf, wf = spectra
    b_n, c_n, hp, wp = xp_shape
    o_n = wf.shape[0]
    ph, pw = _fft_shape(hp, wp)
    fshape = xf.shape[-2:]
    g = np.zeros((b_n, o_n, ph, pw), dtype=gy.dtype)
    g[:, :, k - 1:hp, k - 1:wp] = gy
    gf = sfft.rfft2(g).reshape(b_n, o_n, -1)
    gxf = K.spectral_mix_adjoint(wf.reshape(o_n, c_n, -1), gf)
    gxp = sfft.irfft2(gxf.reshape(b_n, c_n, *fshape), s=(ph, pw))[:, :, :hp, :wp]
    gwf = K.spectral_weight_grad(gf, xf.reshape(b_n, c_n, -1)).reshape(o_n, c_n, *fshape)
    gw_flip = sfft.irfft(sfft.ifft(gwf, axis=-2)[:, :, :k, :], n=pw, axis=-1)[:, :, :, :k]
    gw = np.ascontiguousarray(gw_flip[:, :, ::-1, ::-1])
    return np.ascontiguousarray(gxp, dtype=gy.dtype), gw.astype(gy.dtype, copy=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int = 0, method: str = "auto") -> Tensor:
    """Stride-1 cross-correlation of a ``(B, Cin, H, W)`` batch.

    Output is ``(B, Cout, H - k + 1 + 2*pad, W - k + 1 + 2*pad)``. ``method`` is
    ``"auto"``, ``"gemm"`` or ``"fft"``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    o_n, c_w, k, k2 = wd.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if xd.shape[1] != c_w:
        raise ValueError(f"input has {xd.shape[1]} channels, weight expects {c_w}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    hp, wp = xd.shape[2] + 2 * pad, xd.shape[3] + 2 * pad
    if hp < k or wp < k:
        raise ValueError(f"input {xd.shape[2:]} (pad {pad}) is smaller than kernel {k}")
    arrays = [xd, wd] + ([bias.data] if bias is not None else [])
    _check_same_dtype(*arrays)
    if method == "auto":
        method = "fft" if k >= FFT_MIN_KERNEL else "gemm"
    if method not in ("fft", "gemm"):
        raise ValueError(f"unknown conv method {method!r}")

    wd = np.ascontiguousarray(wd)
    h, w = xd.shape[2], xd.shape[3]
    if method == "gemm":
        out = _conv_gemm_forward(xd, wd, k, pad)
        saved = None
    else:
        xp = _pad_hw(xd, pad)
        out, saved = _conv_fft_forward(xp, wd, k)
        del xp  # only the spectra are needed for backward
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(gy):
        if method == "gemm":
            gx, gw = _conv_gemm_backward(xd, wd, k, pad, gy)
        else:
            gxp, gw = _conv_fft_backward((xd.shape[0], xd.shape[1], hp, wp), k, saved, gy)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv2d", out, inputs, backward)


# ------------------------------------------------------------------------ batchnorm


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics of one batchnorm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn", momentum=0.1, eps=1e-5):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, bn: BatchNormParams, training: bool) -> Tensor:
    """Batch normalization over (batch, height, width) for each channel.

    In training mode batch statistics are used and the running estimates move
    towards them by ``bn.momentum`` (the variance estimate uses the unbiased
    batch variance). In eval mode the layer is a fixed per-channel affine map.
    """
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4 or xd.shape[1] != bn.channels:
        raise ValueError(f"batchnorm over {bn.channels} channels got input {xd.shape}")
    gamma, beta = bn.gamma.data, bn.beta.data
    _check_same_dtype(xd, gamma, beta)
    K = kernels.get_backend()

    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise ValueError("training-mode batchnorm needs at least 2 values per channel")
        xd = np.ascontiguousarray(xd)
        y, mean, var, invstd = K.bn_train_forward(xd, gamma, beta, bn.eps)
        m = bn.momentum
        unbiased = var * (n / (n - 1))
        bn.running_mean = ((1 - m) * bn.running_mean + m * mean).astype(bn.running_mean.dtype)
        bn.running_var = ((1 - m) * bn.running_var + m * unbiased).astype(bn.running_var.dtype)
        bn.num_batches_tracked += 1

        def backward(gy):
            gx, ggamma, gbeta = K.bn_train_backward(xd, mean, invstd, gamma, gy)
            return (gx, ggamma.astype(gamma.dtype), gbeta.astype(gamma.dtype))

        return record("batchnorm2d[train]", y, (x, bn.gamma, bn.beta), backward)

    invstd = (1.0 / np.sqrt(bn.running_var + bn.eps)).astype(xd.dtype)
    rmean = bn.running_mean.astype(xd.dtype)
    scale = gamma * invstd
    shift = beta - rmean * scale
    y = xd * scale[None, :, None, None] + shift[None, :, None, None]

    def backward_eval(gy):
        xhat = (xd - rmean[None, :, None, None]) * invstd[None, :, None, None]
        return (
            gy * scale[None, :, None, None],
            (gy * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
            gy.sum(axis=(0, 2, 3)).astype(gamma.dtype),
        )

    return record("batchnorm2d[eval]", y, (x, bn.gamma, bn.beta), backward_eval)


# ------------------------------------------------------------------ elementwise etc.


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``; derivative at 0 is taken as 1."""
    if not 0 < slope < 1:
        raise ValueError("slope must lie in (0, 1)")
    x = as_tensor(x)
    K = kernels.get_backend()
    y = K.leaky_relu(x.data, slope)

    def backward(g):
        return (K.leaky_relu_grad(y, g, slope),)

    return record("leaky_relu", y, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    _check_same_dtype(a.data, b.data)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return record("concat_channels", out, (a, b), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Sum of absolute differences. ``target`` is treated as a constant."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    out = np.asarray(np.abs(diff).sum(dtype=np.float64), dtype=pred.dtype)

    def backward(g):
        return (np.sign(diff) * g,)

    return record("l1_loss", out, (pred,), backward)


def stride_slice(x: Tensor, s: int) -> Tensor:
    """Keep spatial positions ``(i*s, j*s)`` of a ``(B, C, H, W)`` tensor."""
    x = as_tensor(x)
    if s < 1:
        raise ValueError("stride must be >= 1")
    if s == 1:
        return x
    out = np.ascontiguousarray(x.data[:, :, ::s, ::s])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::s, ::s] = g
        return (gx,)

    return record("stride_slice", out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full_like(x.data, g),)

    return record("sum", out, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` with constant weights; a smooth probe for gradient checks."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ValueError("weights must match x in shape")
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)

    def backward(g):
        return (weights * g,)

    return record("weighted_sum", out, (x,), backward)
