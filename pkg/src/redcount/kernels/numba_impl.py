"""numba-compiled kernels, signature-compatible with ``numpy_impl``.

No ``parallel=True`` anywhere: reductions must run in a fixed order so that
identical inputs give bitwise-identical outputs.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _im2col(xflat, k, row_len, cols):
    c = xflat.shape[0]
    n_out = cols.shape[1]
    for i in range(k):
        for j in range(k):
            off = i * row_len + j
            base = (i * k + j) * c
            for ch in range(c):
                dst = cols[base + ch]
                src = xflat[ch]
                for t in range(n_out):
                    dst[t] = src[off + t]


@njit(cache=True)
def _col2im(cols, c, k, row_len, out):
    n_out = cols.shape[1]
    for i in range(k):
        for j in range(k):
            off = i * row_len + j
            base = (i * k + j) * c
            for ch in range(c):
                dst = out[ch]
                src = cols[base + ch]
                for t in range(n_out):
                    dst[off + t] += src[t]


@njit(cache=True)
def _shift_sum(z, o_n, k, row_len, y):
    n_out = y.shape[1]
    for i in range(k):
        for j in range(k):
            off = i * row_len + j
            base = (i * k + j) * o_n
            for o in range(o_n):
                dst = y[o]
                src = z[base + o]
                for t in range(n_out):
                    dst[t] += src[off + t]


@njit(cache=True)
def _spectral_mix(wf, xf, y):
    o_n, c_n, f_n = wf.shape
    b_n = xf.shape[0]
    for o in range(o_n):
        for c in range(c_n):
            for b in range(b_n):
                for f in range(f_n):
                    y[b, o, f] += wf[o, c, f] * xf[b, c, f]


@njit(cache=True)
def _spectral_mix_adjoint(wf, gf, gx):
    o_n, c_n, f_n = wf.shape
    b_n = gf.shape[0]
    for c in range(c_n):
        for o in range(o_n):
            for b in range(b_n):
                for f in range(f_n):
                    gx[b, c, f] += wf[o, c, f].conjugate() * gf[b, o, f]


@njit(cache=True)
def _spectral_weight_grad(gf, xf, gw):
    b_n, o_n, f_n = gf.shape
    c_n = xf.shape[1]
    for o in range(o_n):
        for c in range(c_n):
            for b in range(b_n):
                for f in range(f_n):
                    gw[o, c, f] += gf[b, o, f] * xf[b, c, f].conjugate()


# Outputs are allocated by numpy (which requests huge pages for large blocks);
# allocating inside the jitted code made these kernels 2-3x slower.


def im2col(xflat, k, row_len, n_out):
    cols = np.empty((k * k * xflat.shape[0], n_out), dtype=xflat.dtype)
    _im2col(np.ascontiguousarray(xflat), k, row_len, cols)
    return cols


def col2im(cols, c, length, k, row_len):
    out = np.zeros((c, length), dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), c, k, row_len, out)
    return out


def shift_sum(z, o, k, row_len, n_out):
    y = np.zeros((o, n_out), dtype=z.dtype)
    _shift_sum(np.ascontiguousarray(z), o, k, row_len, y)
    return y


def spectral_mix(wf, xf):
    y = np.zeros((xf.shape[0], wf.shape[0], wf.shape[2]), dtype=wf.dtype)
    _spectral_mix(np.ascontiguousarray(wf), np.ascontiguousarray(xf), y)
    return y


def spectral_mix_adjoint(wf, gf):
    gx = np.zeros((gf.shape[0], wf.shape[1], wf.shape[2]), dtype=wf.dtype)
    _spectral_mix_adjoint(np.ascontiguousarray(wf), np.ascontiguousarray(gf), gx)
    return gx


def spectral_weight_grad(gf, xf):
    gw = np.zeros((gf.shape[1], xf.shape[1], gf.shape[2]), dtype=gf.dtype)
    _spectral_weight_grad(np.ascontiguousarray(gf), np.ascontiguousarray(xf), gw)
    return gw


@njit(cache=True)
def _leaky_flat(x, slope, out):
    for i in range(x.size):
        v = x[i]
        out[i] = v if v >= 0 else v * slope


@njit(cache=True)
def _leaky_grad_flat(y, g, slope, out):
    for i in range(y.size):
        out[i] = g[i] if y[i] >= 0 else g[i] * slope


def leaky_relu(x, slope):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _leaky_flat(x.reshape(-1), x.dtype.type(slope), out.reshape(-1))
    return out


def leaky_relu_grad(y, g, slope):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g)
    out = np.empty_like(g)
    _leaky_grad_flat(y.reshape(-1), g.reshape(-1), g.dtype.type(slope), out.reshape(-1))
    return out


@njit(cache=True)
def _bn_stats(x):
    b_n, c_n, h, w = x.shape
    n = b_n * h * w
    mean = np.zeros(c_n)
    var = np.zeros(c_n)
    for c in range(c_n):
        acc = 0.0
        for b in range(b_n):
            for i in range(h):
                for j in range(w):
                    acc += x[b, c, i, j]
        m = acc / n
        acc2 = 0.0
        for b in range(b_n):
            for i in range(h):
                for j in range(w):
                    d = x[b, c, i, j] - m
                    acc2 += d * d
        mean[c] = m
        var[c] = acc2 / n
    return mean, var


@njit(cache=True)
def _bn_apply(x, scale, shift, out):
    b_n, c_n, h, w = x.shape
    for b in range(b_n):
        for c in range(c_n):
            s = scale[c]
            t = shift[c]
            for i in range(h):
                for j in range(w):
                    out[b, c, i, j] = x[b, c, i, j] * s + t


@njit(cache=True)
def _bn_backward(x, mean, invstd, gamma, gy, gx):
    b_n, c_n, h, w = x.shape
    n = b_n * h * w
    ggamma = np.zeros(c_n)
    gbeta = np.zeros(c_n)
    for c in range(c_n):
        m = mean[c]
        s = invstd[c]
        sb = 0.0
        sg = 0.0
        for b in range(b_n):
            for i in range(h):
                for j in range(w):
                    g = gy[b, c, i, j]
                    sb += g
                    sg += g * (x[b, c, i, j] - m) * s
        gbeta[c] = sb
        ggamma[c] = sg
        coef = gamma[c] * s / n
        for b in range(b_n):
            for i in range(h):
                for j in range(w):
                    xhat = (x[b, c, i, j] - m) * s
                    gx[b, c, i, j] = coef * (n * gy[b, c, i, j] - sb - xhat * sg)
    return ggamma, gbeta


def bn_train_forward(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    mean, var = _bn_stats(x)
    invstd = 1.0 / np.sqrt(var + eps)
    scale = (gamma * invstd).astype(x.dtype)
    shift = (beta - mean * gamma * invstd).astype(x.dtype)
    y = np.empty_like(x)
    _bn_apply(x, scale, shift, y)
    dt = x.dtype
    return y, mean.astype(dt), var.astype(dt), invstd.astype(dt)


def bn_train_backward(x, mean, invstd, gamma, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    gx = np.empty_like(gy)
    ggamma, gbeta = _bn_backward(
        x, mean.astype(np.float64), invstd.astype(np.float64), gamma.astype(np.float64), gy, gx
    )
    return gx, ggamma.astype(x.dtype), gbeta.astype(x.dtype)
