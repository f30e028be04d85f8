"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations a Gated PixelCNN needs are provided. Convolution is
cross-correlation (the kernel is not flipped), stride is always 1, and
broadcasting is restricted to two cases: a scalar against anything, and a
tensor whose shape is a leading prefix of the other operand's shape (for
example a per-sample, per-channel ``[N, C]`` bias against ``[N, C, H, W]``).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``_parents`` and ``_backward`` are set by the operation that produced the
    tensor; leaves (inputs, parameters) have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add(self, -np.asarray(other, dtype=self.dtype))
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Tape and backward pass


class Tape:
    """Operations reachable from a root, in execution (topological) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Populate ``.grad`` on every tensor in the ancestry of a scalar loss.

    Gradients accumulate into existing ``.grad`` buffers on leaves, so call
    ``zero_grad`` on parameters between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no ancestor requires a gradient")
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# Elementwise ops


def _broadcast_operand(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """View ``b`` so it broadcasts against ``a`` under the prefix rule."""
    if b.shape == a.shape or b.ndim == 0:
        return b
    if b.ndim < a.ndim and a.shape[: b.ndim] == b.shape:
        return b.reshape(b.shape + (1,) * (a.ndim - b.ndim))
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(range(len(shape), g.ndim))
    return g.sum(axis=axes)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.ndim < b.ndim:
        return b, a, True
    return a, b, False


def add(a, b) -> Tensor:
    big, small, _ = _binary_operands(a, b)
    sd = _broadcast_operand(big.data, small.data)
    sshape = small.shape

    def _bw(g):
        return g, _reduce_to(g, sshape)

    return _make(big.data + sd, (big, small), _bw, "add")


def mul(a, b) -> Tensor:
    big, small, _ = _binary_operands(a, b)
    bd = big.data
    sd = _broadcast_operand(bd, small.data)
    sshape = small.shape

    def _bw(g):
        gb = g * sd if big.requires_grad else None
        gs = _reduce_to(g * bd, sshape) if small.requires_grad else None
        return gb, gs

    return _make(bd * sd, (big, small), _bw, "mul")


def _tanh_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - y * y)


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (_tanh_backward(y, g),), "tanh")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: (_sigmoid_backward(y, g),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "relu")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``tanh``, ``sigmoid``, ``relu``, ``mul``, ``add``."""
    if op in ("tanh", "sigmoid", "relu"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}[op](a)
    if op in ("mul", "add"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return mul(a, b) if op == "mul" else add(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.data.size
    return _make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean"
    )


def split_channels(x: Tensor):
    """Split ``[N, 2p, ...]`` into its first and second channel halves."""
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"split_channels needs an even channel count, got {c}")
    p = c // 2
    first, second = x.data[:, :p], x.data[:, p:]

    def _bw_first(g):
        full = np.zeros_like(x.data)
        full[:, :p] = g
        return (full,)

    def _bw_second(g):
        full = np.zeros_like(x.data)
        full[:, p:] = g
        return (full,)

    return (
        _make(np.ascontiguousarray(first), (x,), _bw_first, "split"),
        _make(np.ascontiguousarray(second), (x,), _bw_second, "split"),
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "concat")


def shift(x: Tensor, direction: str, amount: int = 1) -> Tensor:
    """Move image content down or right, zero-filling the vacated rows/columns."""
    if direction not in ("down", "right"):
        raise ValueError(f"direction must be 'down' or 'right', got {direction!r}")
    if amount < 0:
        raise ValueError("shift amount must be non-negative")
    axis = 2 if direction == "down" else 3
    extent = x.shape[axis]
    if amount >= extent and amount > 0:
        raise ValueError(f"shift amount {amount} >= extent {extent}")
    if amount == 0:
        return _make(x.data.copy(), (x,), lambda g: (g,), "shift")
    out = np.zeros_like(x.data)
    if axis == 2:
        out[:, :, amount:] = x.data[:, :, :-amount]
    else:
        out[:, :, :, amount:] = x.data[:, :, :, :-amount]

    def _bw(g):
        back = np.zeros_like(g)
        if axis == 2:
            back[:, :, :-amount] = g[:, :, amount:]
        else:
            back[:, :, :, :-amount] = g[:, :, :, amount:]
        return (back,)

    return _make(out, (x,), _bw, "shift")


def subsample2(x: Tensor) -> Tensor:
    """Keep every second row and column; a stride-1 conv followed by this is a stride-2 conv."""
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, ::2, ::2] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, :, ::2, ::2]), (x,), _bw, "subsample2")


def upsample2(x: Tensor) -> Tensor:
    """Zero-insertion upsampling; followed by a conv this is a transposed conv."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = x.data
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, ::2, ::2]),), "upsample2")


def crop(x: Tensor, height: int, width: int) -> Tensor:
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, :, :height, :width]), (x,), _bw, "crop")


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), _bw, "matmul")


def _normalize_pad(pad):
    if isinstance(pad, int):
        return pad, pad, pad, pad
    if len(pad) == 2:
        return pad[0], pad[0], pad[1], pad[1]
    if len(pad) == 4:
        return tuple(pad)
    raise ValueError(f"pad must be int, (vertical, horizontal) or (top, bottom, left, right), got {pad}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, pad=0) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding.

    ``out[n, o, y, x] = sum_{c, i, j} in[n, c, y + i - top, x + j - left] * kernel[o, c, i, j]``.
    ``pad`` is an int, ``(vertical, horizontal)`` or ``(top, bottom, left, right)``.
    Patches are unrolled channel-major (c, i, j), so each output's reduction
    order is fixed by the kernel layout.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects input [N, C, H, W] and kernel [O, C, kh, kw]")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    top, bottom, left, right = _normalize_pad(pad)
    hp, wp = h + top + bottom, w + left + right
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))) if (top or bottom or left or right) else x.data
    cols = kernels.im2col(xp, kh, kw).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def _bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin * kh * kw)
            gxp = kernels.col2im(dcols, cin, kh, kw, hp, wp)
            gx = gxp[:, :, top:top + h, left:left + w]
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, _bw, "conv2d")


# ---------------------------------------------------------------------------
# Losses


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(_log_softmax(z, axis))


def softmax_cross_entropy(logits: Tensor, targets, axis: int = 1) -> Tensor:
    """Mean negative log-likelihood (nats) of integer targets under softmax(logits).

    ``logits`` has the class axis at ``axis``; ``targets`` has the logits' shape
    with that axis removed. Uses max-subtraction before exponentiating.
    """
    t = np.asarray(targets)
    n_cls = logits.shape[axis]
    if t.dtype.kind not in "iu":
        raise TypeError("targets must be integers")
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise ValueError(f"target out of range [0, {n_cls})")
    z = np.moveaxis(logits.data, axis, -1)
    if z.shape[:-1] != t.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    logp = _log_softmax(z, -1)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    count = t.size
    loss = -picked.mean()

    def _bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], -1) - 1.0, -1)
        grad *= g / count
        return (np.moveaxis(grad, -1, axis),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# Random numbers


class Rng:
    """Seeded PCG64 stream; state round-trips through plain dicts for checkpoints."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent stream for (seed, *keys), e.g. one per generated image."""
        rng = cls(seed)
        rng.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
        return rng

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self.gen.bit_generator.state}

    def set_state(self, state: dict):
        self.seed = int(state["seed"])
        self.gen.bit_generator.state = state["bit_generator"]
