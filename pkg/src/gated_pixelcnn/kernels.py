"""Backend selection for the hot gather/scatter kernels.

The compiled extension is used when it was built; otherwise the numpy twins
are used. Set ``GATED_PIXELCNN_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("GATED_PIXELCNN_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced by environment")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def im2col(xp, kh, kw):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw)


def col2im(cols, n_ch, kh, kw, hp, wp):
    return _impl.col2im(np.ascontiguousarray(cols), n_ch, kh, kw, hp, wp)


def inverse_cdf(probs, u):
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    return _impl.inverse_cdf(probs, u)
