"""Pixel-by-pixel generation in raster order, channels R -> G -> B within a pixel.

Every step runs a full forward pass over the partially generated batch
(no activation caching) and draws the next value by inverse CDF from the
softmax of that step's logits. Each image owns a random stream derived from
``(seed, key)``; all uniforms for an image are drawn up front, one per
generated dimension, so the stream is independent of batch composition.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .layers import Conditioning
from .models import GatedPixelCNN
from .tensor import Rng, softmax


@dataclass
class SampleResult:
    images: np.ndarray  # [N, C, H, W] levels
    probs: Optional[np.ndarray] = None  # [N, C, H, W, L], distribution used at each step


def _conditioning(model: GatedPixelCNN, cond_vectors, count: int) -> Conditioning:
    if model.cfg.conditioning == "none":
        if cond_vectors is not None:
            raise ValueError("unconditional model given conditioning vectors")
        return Conditioning.none()
    if cond_vectors is None:
        raise ValueError("conditional model needs conditioning vectors")
    h = np.asarray(cond_vectors, dtype=model.cfg.np_dtype)
    if h.ndim == 1:
        h = np.repeat(h[None], count, axis=0)
    if h.shape != (count, model.cfg.cond_dim):
        raise ValueError(f"conditioning vectors have shape {h.shape}, expected ({count}, {model.cfg.cond_dim})")
    return model.condition(h)


def _generate(model: GatedPixelCNN, images: np.ndarray, start: int, cond: Conditioning, seed: int,
              keys, temperature: float, record: bool) -> SampleResult:
    cfg = model.cfg
    n, c_n, h_n, w_n = images.shape
    dims = h_n * w_n * c_n
    uniforms = np.stack([Rng.derive(seed, int(k)).uniform(dims) for k in keys]) if n else np.zeros((0, dims))
    probs_rec = np.zeros((n, c_n, h_n, w_n, cfg.levels)) if record else None
    for d in range(start, dims):
        pix, c = divmod(d, c_n)
        y, x = divmod(pix, w_n)
        logits = model.forward_logits(images, cond).data[:, c, :, y, x].astype(np.float64)
        if temperature == 0:
            probs = softmax(logits, axis=-1)
            choice = np.argmax(logits, axis=-1)
        else:
            probs = softmax(logits / temperature, axis=-1)
            choice = kernels.inverse_cdf(probs, uniforms[:, d])
        images[:, c, y, x] = choice
        if record:
            probs_rec[:, c, y, x] = probs
    return SampleResult(images, probs_rec)


def sample(model: GatedPixelCNN, count: int, cond_vectors=None, seed: int = 0, temperature: float = 1.0,
           keys=None, record: bool = False) -> SampleResult:
    """Generate ``count`` images. ``keys`` selects each image's random stream (default 0..count-1)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    cfg = model.cfg
    keys = np.arange(count) if keys is None else np.asarray(keys)
    images = np.zeros((count, cfg.channels, cfg.height, cfg.width), dtype=np.int64)
    cond = _conditioning(model, cond_vectors, count)
    return _generate(model, images, 0, cond, seed, keys, temperature, record)


def interpolation_vectors(h_a, h_b, steps: int) -> np.ndarray:
    """``(1 - t) h_a + t h_b`` for ``steps`` evenly spaced t in [0, 1]."""
    h_a, h_b = np.asarray(h_a, dtype=np.float64), np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape or h_a.ndim != 1:
        raise ValueError("endpoint vectors must be 1-D and the same length")
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    t = np.linspace(0.0, 1.0, steps)[:, None]
    return (1.0 - t) * h_a[None] + t * h_b[None]


def sample_interpolation(model: GatedPixelCNN, h_a, h_b, steps: int, seed: int = 0,
                         temperature: float = 1.0) -> np.ndarray:
    """One image per interpolated vector, all drawn with the same random stream."""
    if np.asarray(h_a).shape[-1] != model.cfg.cond_dim:
        raise ValueError(f"embedding dim {np.asarray(h_a).shape[-1]} != model cond_dim {model.cfg.cond_dim}")
    hs = interpolation_vectors(h_a, h_b, steps)
    return sample(model, steps, hs, seed=seed, temperature=temperature, keys=np.zeros(steps, dtype=int)).images


def complete(model: GatedPixelCNN, partial, known_mask, cond_vectors=None, seed: int = 0,
             temperature: float = 1.0) -> np.ndarray:
    """Resample everything after a known raster prefix.

    ``known_mask`` is a boolean ``[N, C, H, W]`` (or ``[C, H, W]``) array; within
    each image it must be true exactly on a prefix in raster/channel order,
    and that prefix must be the same length for every image.
    """
    images = np.array(partial, dtype=np.int64, copy=True)
    mask = np.asarray(known_mask, dtype=bool)
    if images.ndim == 3:
        images = images[None]
    if mask.ndim == 3:
        mask = np.broadcast_to(mask, images.shape)
    if mask.shape != images.shape:
        raise ValueError("known_mask shape does not match the image")
    flat = mask.transpose(0, 2, 3, 1).reshape(len(images), -1)
    lengths = flat.sum(axis=1)
    for row, ln in zip(flat, lengths):
        if not row[:ln].all() or row[ln:].any():
            raise ValueError("known region is not a raster prefix")
    if len(set(lengths.tolist())) > 1:
        raise ValueError("all images must share the same prefix length")
    start = int(lengths[0]) if len(lengths) else 0
    cond = _conditioning(model, cond_vectors, len(images))
    return _generate(model, images, start, cond, seed, np.arange(len(images)), temperature, False).images
