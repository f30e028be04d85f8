import numpy as np
import pytest


def numeric_grad(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        keep = arr[idx]
        arr[idx] = keep + step
        up = f()
        arr[idx] = keep - step
        down = f()
        arr[idx] = keep
        g[idx] = (up - down) / (2 * step)
    return g


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
