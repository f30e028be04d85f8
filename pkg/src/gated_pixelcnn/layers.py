"""Masked convolutions, the gated activation unit and the two-stack layer block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class MaskSpec:
    """Which kernel taps a masked convolution may use.

    Taps strictly before ``center`` in raster order are always allowed, taps
    after it never are. At the center, output channel group ``g`` may read
    input group ``g'`` iff ``g' < g`` (type ``"A"``) or ``g' <= g`` (type ``"B"``).
    ``center`` defaults to the middle tap.
    """

    kernel_h: int
    kernel_w: int
    mask_type: str = "B"
    color_groups: int = 1
    center: Optional[tuple] = None

    def __post_init__(self):
        if self.mask_type not in ("A", "B"):
            raise ValueError(f"mask_type must be 'A' or 'B', got {self.mask_type!r}")
        if self.color_groups < 1:
            raise ValueError("color_groups must be >= 1")

    @property
    def center_tap(self):
        return self.center if self.center is not None else (self.kernel_h // 2, self.kernel_w // 2)


def channel_groups(count: int, groups: int) -> np.ndarray:
    """Group index of each channel: contiguous equal blocks (R, then G, then B)."""
    if count % groups:
        raise ValueError(f"{count} channels cannot be split into {groups} colour groups")
    return np.arange(count) * groups // count


def build_mask(spec: MaskSpec, in_ch: int, out_ch: int) -> np.ndarray:
    gin = channel_groups(in_ch, spec.color_groups)
    gout = channel_groups(out_ch, spec.color_groups)
    cr, cc = spec.center_tap
    mask = np.zeros((out_ch, in_ch, spec.kernel_h, spec.kernel_w))
    mask[:, :, :cr, :] = 1.0
    mask[:, :, cr, :cc] = 1.0
    if spec.mask_type == "A":
        centre = gin[None, :] < gout[:, None]
    else:
        centre = gin[None, :] <= gout[:, None]
    mask[:, :, cr, cc] = centre
    return mask


def gate_mask(spec: MaskSpec, in_ch: int, p: int) -> np.ndarray:
    """Mask for a combined convolution whose 2p outputs split into (f, g) halves.

    Channel ``i`` of the f half and channel ``i`` of the g half are multiplied
    together, so both halves carry the same group layout.
    """
    half = build_mask(spec, in_ch, p)
    return np.concatenate([half, half], axis=0)


# ---------------------------------------------------------------------------
# Conditioning


@dataclass
class Conditioning:
    """What the gates are conditioned on: nothing, a global vector, or a spatial map."""

    mode: str = "none"
    h: Optional[Tensor] = None
    s: Optional[Tensor] = None

    @classmethod
    def none(cls) -> "Conditioning":
        return cls("none")

    @classmethod
    def global_(cls, h) -> "Conditioning":
        h = T.as_tensor(h)
        if h.ndim == 1:
            h = T.reshape(h, (1, h.shape[0]))
        return cls("global", h=h)

    @classmethod
    def spatial(cls, s: Tensor) -> "Conditioning":
        return cls("spatial", s=T.as_tensor(s))


def conditioning_bias(cond: Conditioning, proj: Optional[Tensor]) -> Optional[Tensor]:
    """``h @ V`` as an ``[N, p]`` bias (global) or a 1x1 conv of ``s`` (spatial)."""
    if cond is None or cond.mode == "none":
        if proj is not None:
            raise ValueError("conditioning projection given but conditioning mode is 'none'")
        return None
    if proj is None:
        raise ValueError(f"conditioning mode {cond.mode!r} needs a projection")
    if cond.mode == "global":
        if proj.ndim != 2:
            raise ValueError("global conditioning needs a [d, p] projection matrix")
        return T.matmul(cond.h, proj)
    if cond.mode == "spatial":
        if proj.ndim != 4:
            raise ValueError("spatial conditioning needs a [p, cs, 1, 1] kernel")
        return T.conv2d(cond.s, proj)
    raise ValueError(f"unknown conditioning mode {cond.mode!r}")


def gated_activation(pre: Tensor, cond: Optional[Conditioning] = None, v_f=None, v_g=None,
                     activation: str = "gated") -> Tensor:
    """``tanh(f + V_f h) * sigmoid(g + V_g h)`` with (f, g) the two channel halves of ``pre``.

    ``activation="relu"`` replaces the gate by ``relu(f) + relu(g)`` (same
    parameter count, no multiplicative interaction); ``"linear"`` by ``f + g``.
    """
    f, g = T.split_channels(pre)
    bias_f = conditioning_bias(cond, v_f)
    bias_g = conditioning_bias(cond, v_g)
    if bias_f is not None:
        f = f + bias_f
        g = g + bias_g
    if activation == "gated":
        return T.tanh(f) * T.sigmoid(g)
    if activation == "relu":
        return T.relu(f) + T.relu(g)
    if activation == "linear":
        return f + g
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# Parameter helpers


def _param(rng: Rng, shape, fan_in: int, dtype, zero: bool = False) -> Tensor:
    if zero:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class GatedBlock:
    """One layer of the network.

    ``architecture="two_stack"``: the Gated PixelCNN block with a vertical stack
    (sees only rows above) and a horizontal stack (sees the current row up to
    the current pixel, plus the vertical stack through a 1x1 link).
    ``architecture="single_stack"``: a plain masked n x n convolution, which
    leaves a blind spot to the upper right.

    The first block reads the image itself. Its horizontal/masked convolution
    uses mask type A, it has no residual, and its vertical convolution is
    followed by a one-row downward shift. Later blocks use type B, and their
    vertical convolutions cover rows ``y - n//2 .. y`` of an input that is
    already strictly above.
    """

    def __init__(self, in_ch: int, features: int, filter_size: int, *, first: bool,
                 color_groups: int = 1, architecture: str = "two_stack", activation: str = "gated",
                 conditioning: str = "none", cond_dim: int = 0, spatial_channels: int = 0,
                 residual: str = "conv", rng: Optional[Rng] = None, dtype=np.float64,
                 zero: bool = False):
        if filter_size % 2 != 1:
            raise ValueError("filter_size must be odd")
        if architecture not in ("two_stack", "single_stack"):
            raise ValueError(f"unknown architecture {architecture!r}")
        if residual not in ("conv", "identity", "none"):
            raise ValueError(f"unknown residual mode {residual!r}")
        rng = rng or Rng(0)
        p, n, a = features, filter_size, filter_size // 2
        self.in_ch, self.p, self.n = in_ch, p, n
        self.first = first
        self.architecture = architecture
        self.activation = activation
        self.conditioning = conditioning
        self.residual = "none" if first else residual
        self.params: dict[str, Tensor] = {}
        self.masks: dict[str, np.ndarray] = {}
        mask_type = "A" if first else "B"
        P = lambda shape, fan: _param(rng, shape, fan, dtype, zero)  # noqa: E731

        if architecture == "two_stack":
            self.params["v_w"] = P((2 * p, in_ch, a + 1, n), in_ch * (a + 1) * n)
            self.params["v_b"] = _zeros((2 * p,), dtype)
            self.params["h_w"] = P((2 * p, in_ch, 1, a + 1), in_ch * (a + 1))
            self.params["h_b"] = _zeros((2 * p,), dtype)
            self.masks["h_w"] = gate_mask(
                MaskSpec(1, a + 1, mask_type, color_groups, center=(0, a)), in_ch, p
            ).astype(dtype)
            self.params["link_w"] = P((2 * p, 2 * p, 1, 1), 2 * p)
            self.params["link_b"] = _zeros((2 * p,), dtype)
        else:
            self.params["m_w"] = P((2 * p, in_ch, n, n), in_ch * n * n)
            self.params["m_b"] = _zeros((2 * p,), dtype)
            self.masks["m_w"] = gate_mask(MaskSpec(n, n, mask_type, color_groups), in_ch, p).astype(dtype)

        if self.residual == "conv":
            self.params["res_w"] = P((p, p, 1, 1), p)
            self.params["res_b"] = _zeros((p,), dtype)
            self.masks["res_w"] = build_mask(MaskSpec(1, 1, "B", color_groups), p, p).astype(dtype)

        stacks = ("v", "h") if architecture == "two_stack" else ("m",)
        if conditioning == "global":
            for s in stacks:
                self.params[f"{s}_cond_f"] = P((cond_dim, p), cond_dim)
                self.params[f"{s}_cond_g"] = P((cond_dim, p), cond_dim)
        elif conditioning == "spatial":
            for s in stacks:
                self.params[f"{s}_cond_f"] = P((p, spatial_channels, 1, 1), spatial_channels)
                self.params[f"{s}_cond_g"] = P((p, spatial_channels, 1, 1), spatial_channels)
        elif conditioning != "none":
            raise ValueError(f"unknown conditioning mode {conditioning!r}")

    def weight(self, name: str) -> Tensor:
        w = self.params[name]
        mask = self.masks.get(name)
        return w if mask is None else w * mask

    def _cond(self, stack: str):
        if self.conditioning == "none":
            return None, None
        return self.params[f"{stack}_cond_f"], self.params[f"{stack}_cond_g"]

    def _residual(self, h_in: Tensor, h_act: Tensor) -> Tensor:
        if self.residual == "conv":
            return h_act + T.conv2d(h_in, self.weight("res_w"), self.params["res_b"])
        if self.residual == "identity":
            return h_act + h_in
        return h_act

    def forward(self, v_in: Optional[Tensor], h_in: Tensor, cond: Optional[Conditioning] = None):
        """Return ``(v_out, h_out)``; ``v_out`` is ``None`` for a single-stack block."""
        a = self.n // 2
        if self.architecture == "single_stack":
            pre = T.conv2d(h_in, self.weight("m_w"), self.params["m_b"], pad=a)
            act = gated_activation(pre, cond, *self._cond("m"), activation=self.activation)
            return None, self._residual(h_in, act)

        v_pre = T.conv2d(v_in, self.params["v_w"], self.params["v_b"], pad=(a, 0, a, a))
        if self.first:
            v_pre = T.shift(v_pre, "down", 1)
        v_out = gated_activation(v_pre, cond, *self._cond("v"), activation=self.activation)
        link = T.conv2d(v_pre, self.params["link_w"], self.params["link_b"])
        h_pre = T.conv2d(h_in, self.weight("h_w"), self.params["h_b"], pad=(0, 0, a, 0)) + link
        h_act = gated_activation(h_pre, cond, *self._cond("h"), activation=self.activation)
        return v_out, self._residual(h_in, h_act)


def gated_layer_forward(v_in: Tensor, h_in: Tensor, block: GatedBlock,
                        cond: Optional[Conditioning] = None):
    return block.forward(v_in, h_in, cond)


class SpatialConditioner:
    """Maps a vector ``h`` to a ``[N, cs, H, W]`` map.

    A dense layer produces a ``cs x ceil(H/4) x ceil(W/4)`` map, then two
    transposed convolutions (zero-insertion upsampling followed by a 3x3
    convolution) double it twice; the result is cropped to ``H x W``.
    """

    def __init__(self, in_dim: int, channels: int, height: int, width: int,
                 rng: Optional[Rng] = None, dtype=np.float64, zero: bool = False):
        rng = rng or Rng(0)
        self.in_dim, self.channels, self.height, self.width = in_dim, channels, height, width
        self.h0, self.w0 = -(-height // 4), -(-width // 4)
        cs = channels
        self.params = {
            "fc_w": _param(rng, (in_dim, cs * self.h0 * self.w0), in_dim, dtype, zero),
            "fc_b": _zeros((cs * self.h0 * self.w0,), dtype),
            "up1_w": _param(rng, (cs, cs, 3, 3), cs * 9, dtype, zero),
            "up1_b": _zeros((cs,), dtype),
            "up2_w": _param(rng, (cs, cs, 3, 3), cs * 9, dtype, zero),
            "up2_b": _zeros((cs,), dtype),
        }

    def __call__(self, h) -> Tensor:
        return map_spatial(self, h)


def map_spatial(conditioner: SpatialConditioner, h) -> Tensor:
    h = T.as_tensor(h)
    if h.ndim == 1:
        h = T.reshape(h, (1, h.shape[0]))
    if h.shape[1] != conditioner.in_dim:
        raise ValueError(f"conditioner expects dim {conditioner.in_dim}, got {h.shape[1]}")
    p = conditioner.params
    n = h.shape[0]
    z = _dense(h, p["fc_w"], p["fc_b"])
    z = T.reshape(T.tanh(z), (n, conditioner.channels, conditioner.h0, conditioner.w0))
    z = T.relu(T.conv2d(T.upsample2(z), p["up1_w"], p["up1_b"], pad=1))
    z = T.conv2d(T.upsample2(z), p["up2_w"], p["up2_b"], pad=1)
    return T.crop(z, conditioner.height, conditioner.width)


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias broadcast over the batch."""
    n = x.shape[0]
    ones = Tensor(np.ones((n, 1), dtype=x.dtype))
    return T.matmul(x, w) + T.matmul(ones, T.reshape(b, (1, b.shape[0])))
