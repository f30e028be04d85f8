"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def col2im(cols, n_ch, kh, kw, hp, wp):
    n, ho, wo = cols.shape[:3]
    six = cols.reshape(n, ho, wo, n_ch, kh, kw)
    out = np.zeros((n, n_ch, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += six[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def inverse_cdf(probs, u):
    cdf = np.cumsum(probs, axis=1)
    hit = cdf > u[:, None]
    idx = np.argmax(hit, axis=1)
    idx[~hit.any(axis=1)] = probs.shape[1] - 1
    return idx.astype(np.int64)
