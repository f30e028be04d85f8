"""Architecture checks: causality, receptive fields, blind spots and gradients.

Dependence is detected by perturbation. The unperturbed input travels in the
same batch as every perturbed copy, so all rows share one evaluation path
and an unchanged logit compares bitwise equal.
"""
from __future__ import annotations

import contextlib
import re
from dataclasses import dataclass
import numpy as np

from . import tensor as T
from .models import GatedPixelCNN, ModelConfig
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class Violation:
    trial: int
    target: tuple  # (y, x, channel) of the logits that moved
    source: tuple  # (y, x, channel) of the perturbed input
    delta: float


@dataclass
class DependencyMap:
    target: tuple  # (y, x, channel)
    grid: np.ndarray  # bool [H, W]: input pixel influences the target's logits
    method: str


def _probe_inputs(shape, seed: int):
    c, h, w = shape
    rng = Rng(seed)
    base = rng.uniform((c, h, w)) * 2.0 - 1.0
    return base


def _perturbed_value(v):
    # a distinct second value, well away from the first
    return -v - np.sign(v + 1e-12) * 0.75


def perturbation_deltas(model: GatedPixelCNN, seed: int = 0, cond_vector=None, chunk: int = 256) -> np.ndarray:
    """``delta[sy, sx, sc, ty, tx, tc]``: max |change| of target logits when source input moves.

    Sources are probed in chunks; the unperturbed input is row 0 of every chunk.
    """
    cfg = model.cfg
    c_n, h_n, w_n = cfg.channels, cfg.height, cfg.width
    base = _probe_inputs((c_n, h_n, w_n), seed)
    sources = [(y, x, c) for y in range(h_n) for x in range(w_n) for c in range(c_n)]
    out = np.zeros((len(sources), c_n, h_n, w_n))
    for lo in range(0, len(sources), chunk):
        part = sources[lo:lo + chunk]
        batch = np.repeat(base[None], 1 + len(part), axis=0)
        for k, (y, x, c) in enumerate(part, start=1):
            batch[k, c, y, x] = _perturbed_value(base[c, y, x])
        cnd = None
        if cond_vector is not None:
            cnd = model.condition(np.repeat(np.reshape(cond_vector, (1, -1)), len(batch), axis=0))
        logits = model.forward_input(Tensor(batch.astype(cfg.np_dtype)), cnd).data
        out[lo:lo + len(part)] = np.abs(logits[1:] - logits[:1]).max(axis=2)
    delta = out.reshape(h_n, w_n, c_n, c_n, h_n, w_n)
    return delta.transpose(0, 1, 2, 4, 5, 3)


def forbidden_pairs(h_n: int, w_n: int, c_n: int) -> np.ndarray:
    """``forbid[sy, sx, sc, ty, tx, tc]``: True where target may NOT depend on source."""
    pix = np.arange(h_n * w_n).reshape(h_n, w_n)
    ch = np.arange(c_n)
    sp = pix[:, :, None, None, None, None]
    tp = pix[None, None, None, :, :, None]
    sc = ch[None, None, :, None, None, None]
    tc = ch[None, None, None, None, None, :]
    allowed = (sp < tp) | ((sp == tp) & (sc < tc))
    return ~allowed


def find_violations(model: GatedPixelCNN, tolerance: float = 0.0, seed: int = 0, trial: int = 0,
                    cond_vector=None):
    cfg = model.cfg
    delta = perturbation_deltas(model, seed, cond_vector)
    bad = (delta > tolerance) & forbidden_pairs(cfg.height, cfg.width, cfg.channels)
    out = []
    for sy, sx, sc, ty, tx, tc in zip(*np.nonzero(bad)):
        out.append(Violation(trial, (int(ty), int(tx), int(tc)), (int(sy), int(sx), int(sc)),
                             float(delta[sy, sx, sc, ty, tx, tc])))
    return out


def causality_check(cfg: ModelConfig, trials: int = 5, tolerance: float = 0.0, seed: int = 0,
                    fault=None) -> list:
    """Exhaustive perturbation test over ``trials`` random weight draws.

    ``fault``, if given, is called on each fresh model before probing
    (for negative controls such as :func:`inject_unmasked_conv`).
    """
    violations = []
    for t in range(trials):
        model = GatedPixelCNN(cfg, seed=seed + 1000 * t)
        if fault is not None:
            fault(model)
        h = None
        if cfg.conditioning != "none":
            h = Rng.derive(seed, t, 1).normal(cfg.cond_dim)
        violations.extend(find_violations(model, tolerance, seed=seed + t, trial=t, cond_vector=h))
    return violations


def inject_unmasked_conv(model: GatedPixelCNN, block: int = 0):
    """Fault injection: remove every mask of one block."""
    b = model.blocks[block]
    for name in list(b.masks):
        b.masks[name] = np.ones_like(b.masks[name])
    return model


# ---------------------------------------------------------------------------
# Receptive fields


def receptive_field_map(model: GatedPixelCNN, target, method: str = "perturbation", seed: int = 0,
                        probes: int = 3) -> DependencyMap:
    """Which input pixels (any channel) move the logits at ``target = (y, x[, channel])``.

    A ReLU that happens to be inactive at one probe input hides real wiring,
    so the map is the union over ``probes`` random inputs.
    """
    cfg = model.cfg
    ty, tx = target[0], target[1]
    tc = target[2] if len(target) > 2 else 0
    grid = np.zeros((cfg.height, cfg.width), dtype=bool)
    for k in range(probes):
        if method == "perturbation":
            delta = perturbation_deltas(model, seed + k)
            grid |= (delta[:, :, :, ty, tx, tc] > 0).any(axis=2)
        elif method == "gradient":
            base = _probe_inputs((cfg.channels, cfg.height, cfg.width), seed + k)
            x = Tensor(base[None].astype(cfg.np_dtype), requires_grad=True)
            logits = model.forward_input(x)
            sel = np.zeros(logits.shape, dtype=cfg.np_dtype)
            sel[0, tc, :, ty, tx] = Rng.derive(seed + k, 99).normal(cfg.levels)
            T.backward(T.sum_all(logits * sel))
            grid |= (x.grad[0] != 0).any(axis=0)
        else:
            raise ValueError(f"unknown method {method!r}")
    return DependencyMap((ty, tx, tc), grid, method)


def _dilate(need: np.ndarray, offsets) -> np.ndarray:
    h_n, w_n = need.shape
    out = np.zeros_like(need)
    ys, xs = np.nonzero(need)
    for dy, dx in offsets:
        yy, xx = ys + dy, xs + dx
        ok = (yy >= 0) & (yy < h_n) & (xx >= 0) & (xx < w_n)
        out[yy[ok], xx[ok]] = True
    return out


def _masked_offsets(n: int, include_center: bool):
    a = n // 2
    offs = [(dy, dx) for dy in range(-a, 0) for dx in range(-a, a + 1)]
    offs += [(0, dx) for dx in range(-a, 0)]
    if include_center:
        offs.append((0, 0))
    return offs


def blind_spot_oracle(architecture: str, depth: int, filter_size: int, dims, target) -> np.ndarray:
    """Input pixels that can reach ``target`` by pure set propagation through the wiring.

    Walks backwards from the target, one layer at a time, collecting the
    positions each layer reads. No numerics are involved. ``depth`` counts
    masked layers; depth 0 is treated like depth 1 (a single masked kernel).
    """
    h_n, w_n = dims
    a = filter_size // 2
    layers = max(depth, 1)
    need_h = np.zeros((h_n, w_n), dtype=bool)
    need_h[target[0], target[1]] = True
    need_v = np.zeros_like(need_h)

    if architecture == "single_stack":
        for k in reversed(range(layers)):
            need_h = _dilate(need_h, _masked_offsets(filter_size, include_center=k > 0))
        return need_h
    if architecture != "two_stack":
        raise ValueError(f"unknown architecture {architecture!r}")

    for k in reversed(range(layers)):
        first = k == 0
        h_offs = [(0, dx) for dx in range(-a, 0 if first else 1)]
        v_rows = range(-a - 1, 0) if first else range(-a, 1)
        v_offs = [(dy, dx) for dy in v_rows for dx in range(-a, a + 1)]
        v_pre = need_h | need_v  # link and vertical gate both read the vertical pre-activation
        new_h = _dilate(need_h, h_offs)
        new_v = _dilate(v_pre, v_offs)
        if first:
            return new_h | new_v
        need_h, need_v = new_h, new_v
    raise AssertionError("unreachable")


def causal_context(dims, target) -> np.ndarray:
    """Pixels strictly before ``target`` in raster order."""
    h_n, w_n = dims
    idx = np.arange(h_n * w_n).reshape(h_n, w_n)
    return idx < target[0] * w_n + target[1]


def missing_fraction(grid: np.ndarray, target) -> float:
    """Share of the causal context that ``grid`` does not reach."""
    ctx = causal_context(grid.shape, target)
    return 1.0 - float((grid & ctx).sum()) / float(ctx.sum())


# ---------------------------------------------------------------------------
# Gradient audit


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


_BIAS = re.compile(r"(^|[._])b\d*$")


@contextlib.contextmanager
def inject_backward_fault():
    """Swap tanh's derivative for a wrong one (negative control for the audit)."""
    original = T._tanh_backward
    T._tanh_backward = lambda y, g: g * (1.0 - y)
    try:
        yield
    finally:
        T._tanh_backward = original


def gradient_audit(cfg: ModelConfig, samples: int = 200, seed: int = 0, step: float = 1e-5,
                   batch: int = 2, loss: str = "nll") -> float:
    """Max relative error between backprop and central differences over a parameter subsample.

    ``loss="nll"`` audits the training loss (bits/dim); ``loss="probe"`` uses a
    fixed random linear functional of the logits, which makes the loss exactly
    linear in each single parameter when activations are linear.

    Biases start at exactly zero, which puts context-free pixels exactly on a
    ReLU kink where a central difference averages the two one-sided slopes.
    The audit therefore jitters biases off zero before probing.
    """
    cfg = cfg.replace(dtype="float64")
    model = GatedPixelCNN(cfg, seed=seed)
    rng = Rng.derive(seed, 17)
    for name, p in model.parameters().items():
        if _BIAS.search(name):
            p.data += 0.1 * rng.normal(p.data.shape)
    images = rng.integers(0, cfg.levels, (batch, cfg.channels, cfg.height, cfg.width))
    cond_vec = rng.normal((batch, cfg.cond_dim)) if cfg.conditioning != "none" else None
    probe = rng.normal((batch, cfg.channels, cfg.levels, cfg.height, cfg.width)) / np.sqrt(images.size)

    def objective() -> Tensor:
        cond = model.condition(cond_vec) if cond_vec is not None else None
        logits = model.forward_logits(images, cond)
        if loss == "nll":
            from .models import nll_bits_per_dim

            return nll_bits_per_dim(logits, images)
        return T.sum_all(logits * probe)

    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    T.backward(objective())
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    flat_choice = rng.integers(0, int(sizes.sum()), samples)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in flat_choice:
        which = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[which - 1] if which else 0))
        p = params[names[which]]
        idx = np.unravel_index(offset, p.data.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        keep = p.data[idx]
        p.data[idx] = keep + step
        up = float(objective().data)
        p.data[idx] = keep - step
        down = float(objective().data)
        p.data[idx] = keep
        numeric = (up - down) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
