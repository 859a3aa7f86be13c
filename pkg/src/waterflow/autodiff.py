"""Dense-tensor forward operations with exact reverse-mode gradients.

The graph is built implicitly: every operation returns a node that remembers
its parents and a closure computing the parent gradients. ``backward`` seeds
the (scalar) terminal node with 1.0 and walks the graph in reverse
topological order, accumulating into ``grad`` on every node that requires it.

Storage is float32 for training and float64 for gradient verification; an
operation never mixes the two. Convolution reduces through a single matmul
per call so repeated runs accumulate in the same order.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

GROUP_NORM_EPS = 1e-6


class Tensor:
    """One node of the operation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    t = Tensor(np.asarray(data, dtype=dtype) if dtype is not None else data)
    return t


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand dims {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_values(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = sigmoid_values(a.data)
    return _node(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _node(out, (a,), lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape),))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# structured primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2d cross-correlation over (batch, channel, row, col) input."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input dims {x.data.shape}, weight dims {w.data.shape}")
    bs, cin, h, ww = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if cin != cin_w or k != k2:
        raise ShapeError(f"conv2d: input dims {x.data.shape} vs weight dims {w.data.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias dims {b.data.shape}, expected ({cout},)")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride {stride} must be >= 1 and pad {pad} >= 0")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (ww + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} too large for input {x.data.shape} with pad {pad}")

    cols = _im2col(x.data, k, stride, pad, ho, wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    need_dx = x.requires_grad

    def backward(g):
        gcol = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        dw = np.tensordot(gcol, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3))
        dx = None
        if need_dx:
            dcols = gcol @ wmat
            dx = _col2im(dcols, x.data.shape, k, stride, pad, ho, wo)
        return dx, dw, db

    return _node(out, (x, w, b), backward)


def _im2col(x, k, stride, pad, ho, wo):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    bs, cin = x.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bs, ho, wo, cin * k * k)


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    bs, cin, h, w = x_shape
    dwin = dcols.reshape(bs, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((bs, cin, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += dwin[
                :, :, :, :, u, v
            ]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def group_count(channels: int, target: int = 8) -> int:
    """Largest divisor of `channels` not exceeding `target` (group-norm groups)."""
    g = min(target, channels)
    while channels % g:
        g -= 1
    return g


def group_norm(x: Tensor, groups: int, gain: Tensor, shift: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    """Normalize to zero mean, unit variance per (batch, group), then per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: expected rank-4 input, got {x.data.shape}")
    bs, c, h, w = x.data.shape
    if c % groups:
        raise ShapeError(f"group_norm: groups {groups} does not divide channels {c}")
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"group_norm: gain/shift dims {gain.data.shape}/{shift.data.shape}, expected ({c},)")
    gx = x.data.reshape(bs, groups, -1)
    mu = gx.mean(axis=2, keepdims=True)
    var = gx.var(axis=2, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = ((gx - mu) * ivar).reshape(bs, c, h, w)
    out = xhat * gain.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        dxhat = (g * gain.data[None, :, None, None]).reshape(bs, groups, -1)
        xhat_g = xhat.reshape(bs, groups, -1)
        n = xhat_g.shape[2]
        # dX for y=(x-mu)/sqrt(var+eps): ivar*(dy - mean(dy) - xhat*mean(dy*xhat))
        dx = ivar * (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xhat_g * (dxhat * xhat_g).mean(axis=2, keepdims=True)
        )
        return dx.reshape(x.data.shape), dgain, dshift

    return _node(out, (x, gain, shift), backward)


_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _bilinear_matrix(size: int, factor: int) -> np.ndarray:
    """Row-stochastic (size*factor, size) interpolation matrix, half-pixel centers."""
    key = (size, factor)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        out = size * factor
        src = (np.arange(out, dtype=np.float64) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, size - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        frac = src - i0
        m = np.zeros((out, size))
        m[np.arange(out), i0] += 1.0 - frac
        m[np.arange(out), i1] += frac
        _BILINEAR_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected rank-4 input, got {x.data.shape}")
    if factor < 1:
        raise ContractError(f"upsample_bilinear: factor {factor} must be >= 1")
    if factor == 1:
        return _node(x.data.copy(), (x,), lambda g: (g,))
    h, w = x.data.shape[2:]
    mh = _bilinear_matrix(h, factor).astype(x.data.dtype)
    mw = _bilinear_matrix(w, factor).astype(x.data.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("ph,bcpq,qw->bchw", mh, g, mw, optimize=True),)

    return _node(out, (x,), backward)


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"downsample_avg: expected rank-4 input, got {x.data.shape}")
    bs, c, h, w = x.data.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"downsample_avg: factor {factor} does not divide spatial dims {h}x{w}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(bs, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        scale = 1.0 / (factor * factor)
        dx = np.repeat(np.repeat(g * scale, factor, axis=2), factor, axis=3)
        return (dx,)

    return _node(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected rank-4 inputs, got {a.data.shape}, {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels: operand dims {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def scale_shift_channels(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel affine modulation: x * (1 + scale) + shift."""
    if x.data.ndim != 4:
        raise ShapeError(f"scale_shift_channels: expected rank-4 input, got {x.data.shape}")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"scale_shift_channels: modulation dims {scale.data.shape}/{shift.data.shape}, expected ({c},)"
        )
    gain = 1.0 + scale.data
    out = x.data * gain[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g):
        dx = g * gain[None, :, None, None]
        dscale = (g * x.data).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        return dx, dscale, dshift

    return _node(out, (x, scale, shift), backward)


def linear(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense map of a rank-1 vector: w @ v + b."""
    if v.data.ndim != 1 or w.data.ndim != 2:
        raise ShapeError(f"linear: vector dims {v.data.shape}, weight dims {w.data.shape}")
    if w.data.shape[1] != v.data.shape[0] or b.data.shape != (w.data.shape[0],):
        raise ShapeError(
            f"linear: weight dims {w.data.shape} incompatible with input {v.data.shape} / bias {b.data.shape}"
        )
    out = w.data @ v.data + b.data

    def backward(g):
        return w.data.T @ g, np.outer(g, v.data), g

    return _node(out, (v, w, b), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every reachable node from a scalar terminal."""
    if loss.data.size != 1:
        raise ContractError(f"backward: terminal node must be scalar, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for p, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g, dtype=p.data.dtype).reshape(p.data.shape)
            p.grad = g if p.grad is None else p.grad + g


class ParameterStore:
    """Ordered collection of named trainable tensors and their gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = parameter(data, name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> Iterable[Tensor]:
        return self._params.values()

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {k!r}: dims {arr.shape} vs expected {t.data.shape}")
            t.data = arr.copy()
