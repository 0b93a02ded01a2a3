"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``numba_impl``.
Arrays passed in are assumed C-contiguous; outputs are freshly allocated.
"""

import numpy as np

NAME = "numpy"


def im2col(xflat, k, row_len, n_out):
    """Unfold a row-major flattened ``(C, L)`` image into ``(k*k*C, n_out)``.

    Block ``t = i*k + j`` holds the image shifted by ``(i, j)``, i.e. the flat
    slice starting at ``i*row_len + j``. Rows are ordered ``(i, j, c)``.
    """
    c = xflat.shape[0]
    cols = np.empty((k * k, c, n_out), dtype=xflat.dtype)
    for i in range(k):
        for j in range(k):
            off = i * row_len + j
            cols[i * k + j] = xflat[:, off:off + n_out]
    return cols.reshape(k * k * c, n_out)


def col2im(cols, c, length, k, row_len):
    """Adjoint of :func:`im2col`: scatter-add shifted blocks into a ``(C, length)`` buffer."""
    n_out = cols.shape[1]
    cols = cols.reshape(k * k, c, n_out)
    out = np.zeros((c, length), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            off = i * row_len + j
            out[:, off:off + n_out] += cols[i * k + j]
    return out


def shift_sum(z, o, k, row_len, n_out):
    """Adjoint of :func:`col2im`: ``y = sum_t z[t*o:(t+1)*o, off_t:off_t + n_out]``."""
    z = z.reshape(k * k, o, -1)
    y = np.array(z[0, :, :n_out])
    for t in range(1, k * k):
        off = (t // k) * row_len + t % k
        y += z[t, :, off:off + n_out]
    return y


def spectral_mix(wf, xf):
    """``Y[b, o, f] = sum_c W[o, c, f] * X[b, c, f]``."""
    w_t = np.ascontiguousarray(wf.transpose(2, 0, 1))
    x_t = np.ascontiguousarray(xf.transpose(2, 1, 0))
    return np.ascontiguousarray(np.matmul(w_t, x_t).transpose(2, 1, 0))


def spectral_mix_adjoint(wf, gf):
    """``GX[b, c, f] = sum_o conj(W[o, c, f]) * G[b, o, f]``."""
    w_t = np.ascontiguousarray(np.conj(wf).transpose(2, 1, 0))
    g_t = np.ascontiguousarray(gf.transpose(2, 1, 0))
    return np.ascontiguousarray(np.matmul(w_t, g_t).transpose(2, 1, 0))


def spectral_weight_grad(gf, xf):
    """``GW[o, c, f] = sum_b G[b, o, f] * conj(X[b, c, f])``."""
    g_t = np.ascontiguousarray(gf.transpose(2, 1, 0))
    x_t = np.ascontiguousarray(np.conj(xf).transpose(2, 0, 1))
    return np.ascontiguousarray(np.matmul(g_t, x_t).transpose(1, 2, 0))


def leaky_relu(x, slope):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_grad(y, g, slope):
    # y >= 0 exactly where x >= 0 because slope > 0; this gives derivative 1 at x == 0
    return np.where(y >= 0, g, g * g.dtype.type(slope))


def bn_train_forward(x, gamma, beta, eps):
    """Batch-statistics normalization over axes (0, 2, 3).

    Returns ``(y, mean, var, invstd)`` where ``var`` is the biased batch variance.
    """
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = np.mean(centered * centered, axis=(0, 2, 3))
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = (gamma * invstd)[None, :, None, None]
    y = centered * scale + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), mean, var, invstd


def bn_train_backward(x, mean, invstd, gamma, gy):
    n = x.shape[0] * x.shape[2] * x.shape[3]
    xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
    gbeta = gy.sum(axis=(0, 2, 3))
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    coef = (gamma * invstd / n)[None, :, None, None]
    gx = coef * (n * gy - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
    return gx.astype(x.dtype, copy=False), ggamma, gbeta
