import math

import numpy as np
import pytest

from gated_pixelcnn import tensor as T
from gated_pixelcnn.layers import Conditioning
from gated_pixelcnn.models import (
    Encoder,
    GatedPixelCNN,
    ModelConfig,
    PixelCNNAutoencoder,
    autoencoder_forward,
    build_model,
    encode,
    model_kind,
    nll_bits_per_dim,
    preset,
    scale_levels,
)
from gated_pixelcnn.tensor import Tensor


def expected_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, written out term by term."""
    p, n, c, big_l = cfg.features, cfg.filter_size, cfg.channels, cfg.levels
    a = n // 2
    q = cfg.head
    total = 0
    for k in range(cfg.layers):
        cin = c if k == 0 else p
        if cfg.architecture == "two_stack":
            total += 2 * p * cin * (a + 1) * n + 2 * p  # vertical
            total += 2 * p * cin * (a + 1) + 2 * p  # horizontal
            total += 4 * p * p + 2 * p  # link
        else:
            total += 2 * p * cin * n * n + 2 * p
        if k > 0:
            total += p * p + p  # residual
        stacks = 2 if cfg.architecture == "two_stack" else 1
        if cfg.conditioning == "global":
            total += stacks * 2 * cfg.cond_dim * p
        elif cfg.conditioning == "spatial":
            total += stacks * 2 * cfg.spatial_channels * p
    total += q * p + q + c * big_l * q + c * big_l
    if cfg.conditioning == "spatial":
        cs = cfg.spatial_channels
        h0, w0 = -(-cfg.height // 4), -(-cfg.width // 4)
        total += cfg.cond_dim * cs * h0 * w0 + cs * h0 * w0 + 2 * (cs * cs * 9 + cs)
    return total


@pytest.mark.parametrize("cfg", [
    preset("tiny"),
    preset("mnist-small"),
    preset("tiny", architecture="single_stack"),
    preset("tiny", channels=3, features=9, levels=8),
    preset("tiny", conditioning="global", cond_dim=3),
    preset("tiny", conditioning="spatial", cond_dim=3, spatial_channels=2),
    preset("tiny", head_width=16),
])
def test_parameter_count_closed_form(cfg):
    assert GatedPixelCNN(cfg).num_parameters() == expected_count(cfg)


def test_large_preset_constructible_count():
    cfg = preset("imagenet-paper")
    assert expected_count(cfg) > 20_000_000
    assert cfg.features == 384 and cfg.layers == 20 and cfg.filter_size == 5


def test_config_validation():
    for bad in [dict(levels=1), dict(filter_size=4), dict(channels=2), dict(features=32, channels=3),
                dict(activation="elu"), dict(architecture="x"), dict(conditioning="global"),
                dict(conditioning="spatial", cond_dim=2), dict(dtype="float16")]:
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    with pytest.raises(ValueError):
        preset("nope")


def test_fingerprint_tracks_config():
    a, b = preset("tiny"), preset("tiny", levels=8)
    assert a.fingerprint() == preset("tiny").fingerprint()
    assert a.fingerprint() != b.fingerprint()
    assert ModelConfig.from_dict(a.to_dict()) == a


def test_scale_levels_endpoints():
    assert np.allclose(scale_levels([0, 1, 2, 3], 4), [-1, -1 / 3, 1 / 3, 1])


def test_logit_shape_and_softmax(rng):
    cfg = preset("tiny", channels=3, features=9, levels=5, height=5, width=6)
    m = GatedPixelCNN(cfg, seed=3)
    img = rng.integers(0, 5, (2, 3, 5, 6))
    logits = m.forward_logits(img).data
    assert logits.shape == (2, 3, 5, 5, 6)
    probs = T.softmax(logits, axis=2)
    assert np.allclose(probs.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(probs > 0)


def test_forward_rejects_bad_images():
    m = GatedPixelCNN(preset("tiny"))
    with pytest.raises(ValueError):
        m.forward_logits(np.zeros((1, 1, 7, 8), dtype=int))
    with pytest.raises(ValueError):
        m.forward_logits(np.full((1, 1, 8, 8), 4))


@pytest.mark.parametrize("levels", [2, 4, 256])
def test_zero_model_uniform_bits(levels):
    cfg = preset("tiny", levels=levels)
    m = GatedPixelCNN(cfg, zero=True)
    img = np.random.default_rng(0).integers(0, levels, (3, 1, 8, 8))
    bpd = float(nll_bits_per_dim(m.forward_logits(img), img).data)
    assert abs(bpd - math.log2(levels)) <= 1e-12


def test_nll_matches_manual(rng):
    logits = rng.normal(size=(2, 1, 3, 2, 2))
    img = rng.integers(0, 3, (2, 1, 2, 2))
    p = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    manual = 0.0
    for i in np.ndindex(img.shape):
        manual -= math.log2(p[i[0], i[1], img[i], i[2], i[3]])
    got = float(nll_bits_per_dim(Tensor(logits), img).data)
    assert got == pytest.approx(manual / img.size, abs=1e-12)


def test_class_conditioning_changes_logits(rng):
    cfg = preset("tiny", conditioning="global", cond_dim=2)
    m = GatedPixelCNN(cfg, seed=1)
    img = rng.integers(0, 4, (1, 1, 8, 8))
    a = m.forward_logits(img, m.condition(np.eye(2)[[0]])).data
    b = m.forward_logits(img, m.condition(np.eye(2)[[1]])).data
    assert np.abs(a - b).max() > 1e-3


def test_spatial_conditioning_runs(rng):
    cfg = preset("tiny", conditioning="spatial", cond_dim=3, spatial_channels=2)
    m = GatedPixelCNN(cfg, seed=1)
    img = rng.integers(0, 4, (2, 1, 8, 8))
    cond = m.condition(rng.normal(size=(2, 3)))
    assert cond.mode == "spatial"
    assert m.forward_logits(img, cond).shape == (2, 1, 4, 8, 8)


def test_conditioning_mode_checked():
    m = GatedPixelCNN(preset("tiny", conditioning="global", cond_dim=2))
    with pytest.raises(ValueError):
        m.forward_logits(np.zeros((1, 1, 8, 8), dtype=int))
    with pytest.raises(ValueError):
        m.condition(np.zeros((1, 3)))
    plain = GatedPixelCNN(preset("tiny"))
    with pytest.raises(ValueError):
        plain.forward_logits(np.zeros((1, 1, 8, 8), dtype=int), Conditioning.global_(np.zeros((1, 2))))


def test_seed_determinism():
    a = GatedPixelCNN(preset("tiny"), seed=5).parameters()
    b = GatedPixelCNN(preset("tiny"), seed=5).parameters()
    c = GatedPixelCNN(preset("tiny"), seed=6).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_float32_model(rng):
    m = GatedPixelCNN(preset("tiny", dtype="float32"), seed=2)
    assert m.forward_logits(rng.integers(0, 4, (1, 1, 8, 8))).data.dtype == np.float32


# encoder and autoencoder


@pytest.mark.parametrize("hw", [(8, 8), (14, 14), (7, 5)])
def test_encoder_output_shape(rng, hw):
    cfg = preset("tiny", bottleneck=10, height=hw[0], width=hw[1])
    enc = Encoder(cfg)
    z = encode(enc, rng.integers(0, 4, (3, 1) + hw))
    assert z.shape == (3, 10)
    with pytest.raises(ValueError):
        Encoder(preset("tiny"))


def test_autoencoder_gradient_reaches_encoder(rng):
    ae = PixelCNNAutoencoder(preset("tiny", bottleneck=4), seed=2)
    img = rng.integers(0, 4, (2, 1, 8, 8))
    h, logits = autoencoder_forward(ae, img)
    assert h.shape == (2, 4) and logits.shape == (2, 1, 4, 8, 8)
    T.backward(nll_bits_per_dim(logits, img))
    grads = [p.grad for k, p in ae.parameters().items() if k.startswith("encoder.")]
    assert all(g is not None for g in grads)
    assert np.abs(ae.parameters()["encoder.fc_w"].grad).max() > 0


def test_autoencoder_config_and_kind():
    ae = build_model("autoencoder", preset("tiny", bottleneck=3))
    assert ae.cfg.conditioning == "global" and ae.cfg.cond_dim == 3
    assert model_kind(ae) == "autoencoder"
    assert model_kind(build_model("pixelcnn", preset("tiny"))) == "pixelcnn"
    with pytest.raises(ValueError):
        build_model("vae", preset("tiny"))
