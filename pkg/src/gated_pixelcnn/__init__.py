"""Gated PixelCNN on a small numpy autodiff engine.

Core pieces: ``tensor`` (reverse-mode autodiff, conv2d), ``layers`` (masks,
gated blocks), ``models`` (full networks and presets), ``data``, ``train``,
``sampler`` and ``diagnostics``. ``kernels.BACKEND`` reports whether the
compiled im2col/col2im/sampling kernels are in use.
"""
from .kernels import BACKEND
from .layers import Conditioning, GatedBlock, MaskSpec, build_mask, gated_activation, gated_layer_forward
from .models import (
    PRESETS,
    Encoder,
    GatedPixelCNN,
    ModelConfig,
    PixelCNNAutoencoder,
    autoencoder_forward,
    encode,
    forward_logits,
    nll_bits_per_dim,
    preset,
)
from .sampler import complete, sample, sample_interpolation
from .tensor import Tensor, backward
from .train import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"
