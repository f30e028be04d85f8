"""Full models: Gated PixelCNN (two-stack or single-stack), conditional variants, autoencoder."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Conditioning, GatedBlock, MaskSpec, SpatialConditioner, build_mask
from .tensor import Rng, Tensor

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    features: int = 32
    filter_size: int = 5
    levels: int = 4
    height: int = 14
    width: int = 14
    channels: int = 1
    activation: str = "gated"
    architecture: str = "two_stack"
    conditioning: str = "none"  # none | global | spatial
    cond_dim: int = 0
    spatial_channels: int = 0
    head_width: int = 0  # 0 means "same as features"
    residual: str = "conv"  # conv | identity
    bottleneck: int = 0  # autoencoder latent size m
    encoder_channels: tuple = (16, 32, 32)
    dtype: str = "float64"

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.filter_size % 2 != 1:
            raise ValueError("filter_size must be odd")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.layers < 1 or self.features < 1:
            raise ValueError("layers and features must be positive")
        if self.features % self.channels or self.head % self.channels:
            raise ValueError("features and head width must be divisible by the channel count")
        if self.activation not in ("gated", "relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.architecture not in ("two_stack", "single_stack"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.conditioning not in ("none", "global", "spatial"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning != "none" and self.cond_dim < 1:
            raise ValueError("conditional models need cond_dim >= 1")
        if self.conditioning == "spatial" and self.spatial_channels < 1:
            raise ValueError("spatial conditioning needs spatial_channels >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))

    @property
    def head(self) -> int:
        return self.head_width or self.features

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


PRESETS = {
    "mnist-small": ModelConfig(layers=6, features=32, filter_size=5, levels=4, height=14, width=14, channels=1),
    # Large 32x32 model; constructible for inspection, far too large to train here.
    "imagenet-paper": ModelConfig(layers=20, features=384, filter_size=5, levels=256, height=32, width=32,
                                  channels=3),
    "tiny": ModelConfig(layers=3, features=8, filter_size=3, levels=4, height=8, width=8, channels=1),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def scale_levels(image, levels: int, dtype=np.float64) -> np.ndarray:
    """Integer levels in [0, L) to floats in [-1, 1]."""
    return (np.asarray(image, dtype=dtype) * (2.0 / (levels - 1)) - 1.0).astype(dtype)


class GatedPixelCNN:
    """Autoregressive image model producing ``[N, C, L, H, W]`` logits.

    Block 0 is the input layer (type-A masks). The head is
    relu -> 1x1 -> relu -> 1x1 on the last horizontal output, with type-B
    colour-group masks so channel c's logits see only channels <= c there.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero: bool = False):
        self.cfg = cfg
        rng = Rng(seed)
        dt = cfg.np_dtype
        groups = cfg.channels
        self.blocks = [
            GatedBlock(
                cfg.channels if k == 0 else cfg.features, cfg.features, cfg.filter_size,
                first=(k == 0), color_groups=groups, architecture=cfg.architecture,
                activation=cfg.activation, conditioning=cfg.conditioning, cond_dim=cfg.cond_dim,
                spatial_channels=cfg.spatial_channels, residual=cfg.residual, rng=rng, dtype=dt,
                zero=zero,
            )
            for k in range(cfg.layers)
        ]
        out = cfg.channels * cfg.levels
        scale = 0.0 if zero else 1.0
        self.head_params = {
            "w1": Tensor((rng.normal((cfg.head, cfg.features, 1, 1)) * scale / np.sqrt(cfg.features)).astype(dt),
                         requires_grad=True),
            "b1": Tensor(np.zeros(cfg.head, dtype=dt), requires_grad=True),
            "w2": Tensor((rng.normal((out, cfg.head, 1, 1)) * scale / np.sqrt(cfg.head)).astype(dt),
                         requires_grad=True),
            "b2": Tensor(np.zeros(out, dtype=dt), requires_grad=True),
        }
        self.head_masks = {
            "w1": build_mask(MaskSpec(1, 1, "B", groups), cfg.features, cfg.head).astype(dt),
            "w2": build_mask(MaskSpec(1, 1, "B", groups), cfg.head, out).astype(dt),
        }
        self.conditioner = None
        if cfg.conditioning == "spatial":
            self.conditioner = SpatialConditioner(cfg.cond_dim, cfg.spatial_channels, cfg.height, cfg.width,
                                                  rng=rng, dtype=dt, zero=zero)

    def parameters(self) -> dict:
        params = {}
        for k, block in enumerate(self.blocks):
            for name, t in block.params.items():
                params[f"block{k}.{name}"] = t
        for name, t in self.head_params.items():
            params[f"head.{name}"] = t
        if self.conditioner is not None:
            for name, t in self.conditioner.params.items():
                params[f"conditioner.{name}"] = t
        return params

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def condition(self, h) -> Conditioning:
        """Build the conditioning object this model expects from a vector batch ``h``."""
        mode = self.cfg.conditioning
        if mode == "none":
            return Conditioning.none()
        h = T.as_tensor(h if isinstance(h, Tensor) else np.asarray(h, dtype=self.cfg.np_dtype))
        if h.ndim == 1:
            h = T.reshape(h, (1, h.shape[0]))
        if h.shape[1] != self.cfg.cond_dim:
            raise ValueError(f"conditioning vector has dim {h.shape[1]}, model expects {self.cfg.cond_dim}")
        if mode == "global":
            return Conditioning.global_(h)
        return Conditioning.spatial(self.conditioner(h))

    def _check_cond(self, cond: Optional[Conditioning]) -> Conditioning:
        cond = cond or Conditioning.none()
        if cond.mode != self.cfg.conditioning:
            raise ValueError(f"model expects conditioning {self.cfg.conditioning!r}, got {cond.mode!r}")
        return cond

    def forward_input(self, x: Tensor, cond: Optional[Conditioning] = None) -> Tensor:
        """Logits from an already-scaled float input ``[N, C, H, W]``."""
        cfg = self.cfg
        cond = self._check_cond(cond)
        v = h = x
        for block in self.blocks:
            v, h = block.forward(v, h, cond)
        hp = self.head_params
        nonlin = T.relu if cfg.activation != "linear" else (lambda t: t)
        z = T.conv2d(nonlin(h), hp["w1"] * self.head_masks["w1"], hp["b1"])
        z = T.conv2d(nonlin(z), hp["w2"] * self.head_masks["w2"], hp["b2"])
        n = x.shape[0]
        return T.reshape(z, (n, cfg.channels, cfg.levels, cfg.height, cfg.width))

    def forward_logits(self, image, cond: Optional[Conditioning] = None) -> Tensor:
        img = np.asarray(image)
        if img.ndim != 4 or img.shape[1:] != (self.cfg.channels, self.cfg.height, self.cfg.width):
            raise ValueError(f"image shape {img.shape} does not match model "
                             f"(N, {self.cfg.channels}, {self.cfg.height}, {self.cfg.width})")
        if img.size and (img.min() < 0 or img.max() >= self.cfg.levels):
            raise ValueError(f"image levels must lie in [0, {self.cfg.levels})")
        x = Tensor(scale_levels(img, self.cfg.levels, self.cfg.np_dtype))
        return self.forward_input(x, cond)


def forward_logits(model: GatedPixelCNN, image, cond: Optional[Conditioning] = None) -> Tensor:
    return model.forward_logits(image, cond)


def nll_bits_per_dim(logits: Tensor, image) -> Tensor:
    """Mean over pixels and channels of -log2 p(true level)."""
    return T.softmax_cross_entropy(logits, np.asarray(image, dtype=np.int64), axis=2) * (1.0 / LN2)


class Encoder:
    """Three stride-2 3x3 convolutions with ReLU, then a dense layer to ``m`` values."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero: bool = False):
        if cfg.bottleneck < 1:
            raise ValueError("encoder needs bottleneck >= 1")
        self.cfg = cfg
        rng = Rng(seed)
        dt = cfg.np_dtype
        scale = 0.0 if zero else 1.0
        self.params = {}
        cin = cfg.channels
        h, w = cfg.height, cfg.width
        for k, cout in enumerate(cfg.encoder_channels):
            fan = cin * 9
            self.params[f"conv{k}_w"] = Tensor((rng.normal((cout, cin, 3, 3)) * scale * np.sqrt(2.0 / fan)).astype(dt),
                                               requires_grad=True)
            self.params[f"conv{k}_b"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)
            cin = cout
            h, w = -(-h // 2), -(-w // 2)
        feat = cin * h * w
        self.params["fc_w"] = Tensor((rng.normal((feat, cfg.bottleneck)) * scale / np.sqrt(feat)).astype(dt),
                                     requires_grad=True)
        self.params["fc_b"] = Tensor(np.zeros(cfg.bottleneck, dtype=dt), requires_grad=True)

    def parameters(self) -> dict:
        return {f"encoder.{k}": v for k, v in self.params.items()}

    def __call__(self, image) -> Tensor:
        return encode(self, image)


def encode(enc: Encoder, image) -> Tensor:
    cfg = enc.cfg
    img = np.asarray(image)
    if img.ndim != 4 or img.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ValueError(f"image shape {img.shape} does not match encoder config")
    z = Tensor(scale_levels(img, cfg.levels, cfg.np_dtype))
    for k in range(len(cfg.encoder_channels)):
        z = T.relu(T.subsample2(T.conv2d(z, enc.params[f"conv{k}_w"], enc.params[f"conv{k}_b"], pad=1)))
    n = img.shape[0]
    z = T.reshape(z, (n, -1))
    ones = Tensor(np.ones((n, 1), dtype=cfg.np_dtype))
    return T.matmul(z, enc.params["fc_w"]) + T.matmul(ones, T.reshape(enc.params["fc_b"], (1, cfg.bottleneck)))


class PixelCNNAutoencoder:
    """Encoder to an m-vector, decoded by a Gated PixelCNN conditioned on it globally."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero: bool = False):
        dec_cfg = cfg.replace(conditioning="global", cond_dim=cfg.bottleneck)
        self.cfg = dec_cfg
        self.encoder = Encoder(dec_cfg, seed=seed + 7919, zero=zero)
        self.decoder = GatedPixelCNN(dec_cfg, seed=seed, zero=zero)

    def parameters(self) -> dict:
        params = dict(self.encoder.parameters())
        params.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return params

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def forward(self, image):
        return autoencoder_forward(self, image)


def autoencoder_forward(ae: PixelCNNAutoencoder, image):
    h = encode(ae.encoder, image)
    logits = ae.decoder.forward_logits(image, Conditioning.global_(h))
    return h, logits


def build_model(kind: str, cfg: ModelConfig, seed: int = 0, zero: bool = False):
    if kind == "pixelcnn":
        return GatedPixelCNN(cfg, seed=seed, zero=zero)
    if kind == "autoencoder":
        return PixelCNNAutoencoder(cfg, seed=seed, zero=zero)
    raise ValueError(f"unknown model kind {kind!r}")


def model_kind(model) -> str:
    return "autoencoder" if isinstance(model, PixelCNNAutoencoder) else "pixelcnn"
