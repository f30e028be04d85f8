"""Compare the compiled kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row times one kernel on both backends and checks the outputs agree
bitwise. The last rows time a full training step of the mnist-small preset
under each backend (the backend is chosen at import, so those run in
subprocesses).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gated_pixelcnn import _kernels_py as py_k

try:
    from gated_pixelcnn import _kernels as cy_k
except ImportError:
    cy_k = None

STEP_SNIPPET = """
import time, numpy as np
from gated_pixelcnn.models import preset, GatedPixelCNN
from gated_pixelcnn.train import TrainConfig, Optimizer, train_step
cfg = preset("mnist-small")
m = GatedPixelCNN(cfg, seed=0)
tc = TrainConfig()
opt = Optimizer(m.parameters(), tc)
x = np.random.default_rng(0).integers(0, cfg.levels, (32, 1, 14, 14))
train_step(m, x, None, opt, tc)
t = time.perf_counter()
for _ in range({n}):
    train_step(m, x, None, opt, tc)
print((time.perf_counter() - t) / {n})
"""


def cases():
    rng = np.random.default_rng(0)
    xp = rng.normal(size=(32, 32, 18, 18))
    cols = py_k.im2col(xp, 5, 5)
    probs = rng.random((4096, 256))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(4096)
    return [
        ("im2col 32x32x18x18 k5", "im2col", (xp, 5, 5)),
        ("col2im 32x32x18x18 k5", "col2im", (cols, 32, 5, 5, 18, 18)),
        ("inverse_cdf 4096x256", "inverse_cdf", (probs, u)),
    ]


def step_time(backend: str, n: int) -> float:
    env = dict(os.environ, GATED_PIXELCNN_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5, help="training steps timed per backend")
    args = ap.parse_args(argv)
    if cy_k is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for label, name, call_args in cases():
        f_py = getattr(py_k, name)
        t_py = min(timeit.repeat(lambda: f_py(*call_args), number=1, repeat=args.repeat)) * 1e3
        if cy_k is None:
            print(f"{label:28s} {t_py:10.2f} {'-':>10s}")
            continue
        f_cy = getattr(cy_k, name)
        t_cy = min(timeit.repeat(lambda: f_cy(*call_args), number=1, repeat=args.repeat)) * 1e3
        same = np.array_equal(np.asarray(f_py(*call_args)), np.asarray(f_cy(*call_args)))
        print(f"{label:28s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:8.2f}x  {same}")
    if args.steps:
        t_py = step_time("python", args.steps) * 1e3
        line = f"{'train step mnist-small b32':28s} {t_py:10.1f}"
        if cy_k is not None:
            t_cy = step_time("cython", args.steps) * 1e3
            line += f" {t_cy:10.1f} {t_py / t_cy:8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
