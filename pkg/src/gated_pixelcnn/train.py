"""Optimizers, the training loop, and bit-exact checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .layers import Conditioning
from .models import ModelConfig, PixelCNNAutoencoder, autoencoder_forward, build_model, model_kind, nll_bits_per_dim
from .tensor import Rng

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Desk defaults; none of these values come from the reference training setup."""

    optimizer: str = "adam"  # adam | sgd_momentum
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    clip_norm: Optional[float] = None
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_limit: int = 512  # held-out images scored per evaluation

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("lr must be >= 0; batch_size and eval_every must be positive")


class Optimizer:
    """Adam or SGD with momentum over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.kind = cfg.optimizer
        self.cfg = cfg
        self.step_count = 0
        self.buffers: dict[str, np.ndarray] = {}
        for name, p in params.items():
            if self.kind == "adam":
                self.buffers[f"m:{name}"] = np.zeros_like(p.data)
                self.buffers[f"v:{name}"] = np.zeros_like(p.data)
            else:
                self.buffers[f"u:{name}"] = np.zeros_like(p.data)

    def update(self, params: dict, lr: Optional[float] = None):
        cfg = self.cfg
        lr = cfg.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if self.kind == "adam":
                m, v = self.buffers[f"m:{name}"], self.buffers[f"v:{name}"]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** t)
                vhat = v / (1 - cfg.beta2 ** t)
                step = lr * mhat / (np.sqrt(vhat) + cfg.eps)
            else:
                u = self.buffers[f"u:{name}"]
                u *= cfg.momentum
                u += g
                step = lr * u
            p.data -= step.astype(p.data.dtype, copy=False)


def parameters_of(model) -> dict:
    return model.parameters()


def _param_norms(params: dict) -> str:
    parts = [f"{k}={np.linalg.norm(v.data):.3g}" for k, v in params.items()]
    return ", ".join(parts)


def batch_conditioning(model, dataset: Dataset, idx) -> Optional[np.ndarray]:
    """Vectors a conditional model consumes for the given examples: embeddings or one-hot labels."""
    cfg = model.cfg
    if isinstance(model, PixelCNNAutoencoder) or cfg.conditioning == "none":
        return None
    emb = getattr(dataset, "embeddings", None)
    if emb is not None:
        return np.asarray(emb[idx], dtype=cfg.np_dtype)
    if dataset.labels is None:
        raise ValueError("conditional model needs labels or embeddings")
    return np.eye(cfg.cond_dim, dtype=cfg.np_dtype)[dataset.labels[idx]]


def batch_loss(model, images, cond_vectors=None) -> T.Tensor:
    """Mean bits/dim of a batch as a differentiable scalar."""
    if isinstance(model, PixelCNNAutoencoder):
        _, logits = autoencoder_forward(model, images)
    else:
        cond = model.condition(cond_vectors) if cond_vectors is not None else Conditioning.none()
        logits = model.forward_logits(images, cond)
    return nll_bits_per_dim(logits, images)


def clip_gradients(params: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()
                              if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def train_step(model, images, cond_vectors, opt: Optimizer, cfg: TrainConfig, step: int = 0) -> float:
    """One forward, one backward, one update. Returns the pre-update bits/dim."""
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    try:
        loss = batch_loss(model, images, cond_vectors)
        T.backward(loss)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite value at step {step}: {exc}; norms: {_param_norms(params)}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step}; norms: {_param_norms(params)}")
    if cfg.clip_norm:
        clip_gradients(params, cfg.clip_norm)
    opt.update(params)
    return value


def evaluate(model, dataset: Dataset, batch_size: int = 64, limit: Optional[int] = None) -> float:
    """Mean bits/dim over (the first ``limit`` images of) a dataset."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    total = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        loss = batch_loss(model, dataset.images[idx], batch_conditioning(model, dataset, idx))
        total += float(loss.data) * len(idx)
    return total / n


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Examples used at ``step``: consecutive slices of a per-epoch permutation."""
    per_epoch = max(1, n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch]))).permutation(n)
    if batch_size >= n:
        return perm
    return perm[pos * batch_size:(pos + 1) * batch_size]


@dataclass
class TrainingState:
    model: object
    optimizer: Optimizer
    train_config: TrainConfig
    rng: Rng
    step: int = 0
    history: list = field(default_factory=list)
    window: list = field(default_factory=list)  # train losses since the last history row

    @classmethod
    def fresh(cls, model, cfg: TrainConfig) -> "TrainingState":
        return cls(model, Optimizer(model.parameters(), cfg), cfg, Rng(cfg.seed))


def fit(model, train: Dataset, cfg: TrainConfig, eval_set: Optional[Dataset] = None,
        state: Optional[TrainingState] = None, checkpoint_path=None, stop_after: Optional[int] = None,
        target_bpd: Optional[float] = None) -> TrainingState:
    """Train to ``cfg.steps``; a history row ``(step, train bpd, eval bpd)`` every ``eval_every`` steps.

    ``state`` resumes a previous run. ``stop_after`` halts early at that step
    (to simulate an interruption). ``target_bpd`` stops once an evaluation
    reaches it. When ``checkpoint_path`` is set, a checkpoint is written at
    every history row.
    """
    state = state or TrainingState.fresh(model, cfg)
    model = state.model
    eval_set = eval_set if eval_set is not None else train
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    while state.step < end:
        idx = batch_indices(len(train), cfg.batch_size, cfg.seed, state.step)
        loss = train_step(model, train.images[idx], batch_conditioning(model, train, idx),
                          state.optimizer, cfg, state.step)
        state.window.append(loss)
        state.step += 1
        if state.step % cfg.eval_every == 0:
            ev = evaluate(model, eval_set, limit=cfg.eval_limit)
            state.history.append((state.step, float(np.mean(state.window)), ev))
            state.window = []
            log.info("step %d train %.4f eval %.4f bits/dim", *state.history[-1])
            if checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
            if target_bpd is not None and ev <= target_bpd:
                break
    return state


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: magic (8) | version u32 | config fingerprint (32, sha256) |
#         metadata length u64 | metadata JSON | block count u32 |
#         blocks (name, dtype, shape, raw little-endian data) | sha256 of all preceding bytes.

MAGIC = b"GPCNNCK\x00"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _encode_blocks(arrays: dict) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"cannot serialize dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def _decode_blocks(buf: bytes, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += size
    return arrays, pos


def checkpoint_bytes(state: TrainingState) -> bytes:
    model = state.model
    arrays = {f"param:{k}": v.data for k, v in model.parameters().items()}
    arrays.update({f"opt:{k}": v for k, v in state.optimizer.buffers.items()})
    meta = {
        "kind": model_kind(model),
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(state.train_config),
        "optimizer": {"kind": state.optimizer.kind, "step_count": state.optimizer.step_count},
        "rng": state.rng.get_state(),
        "step": state.step,
        "history": [list(r) for r in state.history],
        "window": [float(x).hex() for x in state.window],
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    fp = bytes.fromhex(model.cfg.fingerprint())
    body = MAGIC + struct.pack("<I", VERSION) + fp + struct.pack("<Q", len(meta_raw)) + meta_raw
    body += _encode_blocks(arrays)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainingState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> TrainingState:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 4 + 32 + 8 + 32:
        raise CheckpointError("checkpoint truncated")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads version {VERSION}")
    fp = buf[pos:pos + 32].hex()
    pos += 32
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise CheckpointError(f"config fingerprint mismatch: checkpoint {fp[:12]}, expected {expected_fingerprint[:12]}")
    (mlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    meta = json.loads(body[pos:pos + mlen])
    pos += mlen
    arrays, _ = _decode_blocks(body, pos)

    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.fingerprint() != fp:
        raise CheckpointError("stored config does not match header fingerprint")
    model = build_model(meta["kind"], cfg, zero=True)
    for name, p in model.parameters().items():
        data = arrays[f"param:{name}"]
        if data.shape != p.data.shape:
            raise CheckpointError(f"parameter {name} has shape {data.shape}, expected {p.data.shape}")
        p.data = data
    tcfg = TrainConfig(**meta["train_config"])
    opt = Optimizer(model.parameters(), tcfg)
    opt.kind = meta["optimizer"]["kind"]
    opt.step_count = meta["optimizer"]["step_count"]
    opt.buffers = {k[4:]: v for k, v in arrays.items() if k.startswith("opt:")}
    rng = Rng(meta["rng"]["seed"])
    rng.set_state(meta["rng"])
    return TrainingState(
        model=model, optimizer=opt, train_config=tcfg, rng=rng, step=meta["step"],
        history=[tuple(r) for r in meta["history"]],
        window=[float.fromhex(x) for x in meta["window"]],
    )
