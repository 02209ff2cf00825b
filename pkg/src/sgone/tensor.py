"""Dense tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`GradTape` whenever one
of their inputs requires a gradient.  Outside a tape every op is a plain
numpy computation, which is what evaluation uses.

Single images only (no batch axis): feature maps are ``C x H x W``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus gradient bookkeeping.

    ``data`` is stored row-major; ``grad`` (when present) has the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: GradTape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  :meth:`backward` may be called once.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        out.requires_grad = True
        out.tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward() called twice on a consumed tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        # Recording order is a topological order, so reverse replay suffices.
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.tape is not self:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``."""
    if loss.tape is None:
        raise TapeError("loss was not produced under an active tape")
    loss.tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop].copy(), (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial shapes differ, {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:ca], g[ca:]))


def elementwise_mul_broadcast(features: Tensor, gate: Tensor) -> Tensor:
    """Multiply every channel of ``features`` (c x h x w) by ``gate`` (1 x h x w)."""
    if features.data.ndim != 3 or gate.data.ndim != 3 or gate.shape[0] != 1 \
            or features.shape[1:] != gate.shape[1:]:
        raise ShapeError(
            f"elementwise_mul_broadcast: features {features.shape} vs map {gate.shape}")
    f, m = features.data, gate.data
    return _make(f * m, (features, gate),
                 lambda g: (g * m, (g * f).sum(axis=0, keepdims=True)))


def weighted_spatial_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum_{y,x} w[y,x] * x[c,y,x] / sum w, for a constant weight field."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape[1:]:
        raise ShapeError(f"weighted_spatial_mean: weights {w.shape} vs features {x.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("weighted_spatial_mean: weights sum to zero")
    wn = w / total
    out = np.einsum("chw,hw->c", x.data, wn)
    return _make(out, (x,), lambda g: (g[:, None, None] * wn[None],))


# ---------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (C, Ho, Wo, k, k) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, via im2col."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernel.shape
    if kc != c_in or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride).transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, ho * wo)
    kmat = kernel.data.reshape(c_out, -1)
    out = kmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient goes to the first maximal site in row-major order."""
    c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: spatial dims of {x.shape} smaller than window {window}")
    win = _windows(x.data, window, stride)
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, window)
        ci, oi, oj = np.indices(arg.shape)
        np.add.at(gx, (ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# bilinear resize


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out x n_in) interpolation weights, pixel-centre aligned, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale_ - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


_matrix_cache: dict[tuple, np.ndarray] = {}


def _cached_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _matrix_cache.get(key)
    if m is None:
        m = _matrix_cache[key] = bilinear_matrix(n_in, n_out, dtype)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize: expected c x h x w, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be positive")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    rh = _cached_matrix(h, out_h, x.dtype)
    rw = _cached_matrix(w, out_w, x.dtype)
    out = np.einsum("oh,chw,pw->cop", rh, x.data, rw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", rh, g, rw, optimize=True),))


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target] for 2 x h x w logits."""
    t = np.asarray(target)
    if logits.data.ndim != 3 or logits.shape[1:] != t.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {t.shape}")
    n_cls = logits.shape[0]
    if t.size and (t.min() < 0 or t.max() >= n_cls or not np.all(t == np.round(t))):
        raise ValueError(f"softmax_cross_entropy: labels must be integers in [0, {n_cls})")
    t = t.astype(np.int64)
    z = logits.data
    zmax = z.max(axis=0, keepdims=True)
    lse = zmax[0] + np.log(np.exp(z - zmax).sum(axis=0))
    picked = np.take_along_axis(z, t[None], axis=0)[0]
    n = t.size
    loss = (lse - picked).sum() / n

    def bw(g):
        p = np.exp(z - lse[None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[None], 1.0, axis=0)
        return ((p - onehot) * (g / n),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)
