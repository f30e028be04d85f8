# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for the convolution core and the sampler.

Every routine here has a twin in ``_kernels_py`` that produces bitwise
identical results; the accumulation order in ``col2im`` is the same
(kernel row, then kernel column) in both.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw):
    """Unfold a padded batch into patch rows.

    Returns an array of shape (N, Ho, Wo, C*kh*kw) whose last axis is ordered
    channel-major, then kernel row, then kernel column.
    """
    cdef Py_ssize_t n_img = xp.shape[0], n_ch = xp.shape[1]
    cdef Py_ssize_t ho = xp.shape[2] - kh + 1, wo = xp.shape[3] - kw + 1
    cdef Py_ssize_t n, c, i, j, y, x, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_img, ho, wo, n_ch * kh * kw), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(n_img):
            for y in range(ho):
                for x in range(wo):
                    col = 0
                    for c in range(n_ch):
                        for i in range(kh):
                            for j in range(kw):
                                o[n, y, x, col] = xp[n, c, y + i, x + j]
                                col = col + 1
    return out


def col2im(real[:, :, :, ::1] cols, int n_ch, int kh, int kw, int hp, int wp):
    """Scatter-add patch rows back onto a padded (N, C, hp, wp) canvas."""
    cdef Py_ssize_t n_img = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t n, c, i, j, y, x, base
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_img, n_ch, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for n in range(n_img):
            for c in range(n_ch):
                for i in range(kh):
                    for j in range(kw):
                        base = (c * kh + i) * kw + j
                        for y in range(ho):
                            for x in range(wo):
                                o[n, c, y + i, x + j] += cols[n, y, x, base]
    return out


def inverse_cdf(double[:, ::1] probs, double[::1] u):
    """Row-wise inverse-CDF draw: smallest k with cumsum(probs[r])[k] > u[r]."""
    cdef Py_ssize_t rows = probs.shape[0], k_max = probs.shape[1]
    cdef Py_ssize_t r, k
    cdef double acc
    out = np.empty(rows, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for r in range(rows):
            acc = 0.0
            o[r] = k_max - 1
            for k in range(k_max):
                acc = acc + probs[r, k]
                if acc > u[r]:
                    o[r] = k
                    break
    return out
