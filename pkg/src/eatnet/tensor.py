"""Minimal reverse-mode autodiff tensor engine backed by numpy.

Every value flowing through the network is a :class:`Tensor`.  Ops build an
implicit tape: each result remembers its parents and a backward closure, and
``Tensor.backward`` replays the closures in reverse construction order,
accumulating gradients additively at fan-out points.

Two precision modes exist: 64-bit for verification (gradient checks, oracle
suites) and 32-bit for training throughput.  The mode is process-global and
must not be switched in the middle of building a graph.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Optional, Sequence

import numpy as np


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required."""


_DTYPE = np.float64

_counter = itertools.count()


def set_precision(bits: int) -> None:
    """Select the global numeric precision: 64 (verification) or 32 (training)."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._order = next(_counter)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(*shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(*shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape -----------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Visits every reachable node exactly once, in reverse construction
        order (a valid topological order by construction), and leaves
        d(loss)/d(leaf) in ``leaf.grad`` for every requires_grad leaf.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._order, reverse=True)
        self._accumulate(np.ones_like(self.data))
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, expo):
        return pow_scalar(self, float(expo))

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._order = next(_counter)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of an input that was broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def pow_scalar(a: Tensor, expo: float) -> Tensor:
    data = a.data ** expo

    def backward(g):
        a._accumulate(g * expo * a.data ** (expo - 1.0))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch form
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward)


# -- shape primitives ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape).copy()  # no aliasing between tensors

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def index(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(np.array(data, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _make(data, tensors, backward)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x[..., Din] @ weight[Dout, Din].T + bias."""
    dout, din = weight.data.shape
    if x.data.shape[-1] != din:
        raise ValueError(
            f"linear: input trailing extent {x.data.shape[-1]} != Din {din}")
    data = np.matmul(x.data, weight.data.T)
    if bias is not None:
        data = data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, dout)
        x2 = x.data.reshape(-1, din)
        x._accumulate(np.matmul(g, weight.data).reshape(x.data.shape))
        weight._accumulate(np.matmul(g2.T, x2))
        if bias is not None:
            bias._accumulate(g2.sum(axis=0))

    return _make(data, parents, backward)


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2D convolution (cross-correlation) via explicit patch gathering.

    x: [B, C, H, W], weight: [Co, C/groups, kh, kw], bias: [Co].
    """
    if stride < 1 or dilation < 1 or groups < 1:
        raise ValueError("stride, dilation and groups must be >= 1")
    B, C, H, W = x.data.shape
    Co, Ci, kh, kw = weight.data.shape
    if Ci * groups != C:
        raise ValueError(f"conv2d: weight expects {Ci * groups} input channels, got {C}")
    if Co % groups != 0:
        raise ValueError("conv2d: out channels not divisible by groups")
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: empty output ({Ho}x{Wo}) for input {H}x{W}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ri = (dilation * np.arange(kh))[:, None] + (stride * np.arange(Ho))[None, :]
    cj = (dilation * np.arange(kw))[:, None] + (stride * np.arange(Wo))[None, :]
    I = ri[:, None, :, None]   # [kh,1,Ho,1]
    J = cj[None, :, None, :]   # [1,kw,1,Wo]
    cols = xp[:, :, I, J]      # [B, C, kh, kw, Ho, Wo]

    G = groups
    Cog = Co // G
    colsg = cols.reshape(B, G, Ci, kh, kw, Ho, Wo)
    wg = weight.data.reshape(G, Cog, Ci, kh, kw)
    out = np.einsum("bgcijyx,gocij->bgoyx", colsg, wg, optimize=True)
    out = out.reshape(B, Co, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gg = g.reshape(B, G, Cog, Ho, Wo)
        gw = np.einsum("bgcijyx,bgoyx->gocij", colsg, gg, optimize=True)
        weight._accumulate(gw.reshape(Co, Ci, kh, kw))
        gcols = np.einsum("gocij,bgoyx->bgcijyx", wg, gg, optimize=True)
        gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.data.dtype)
        np.add.at(gxp, (slice(None), slice(None), I, J),
                  gcols.reshape(B, C, kh, kw, Ho, Wo))
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        x._accumulate(gx)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward)


# -- bilinear sampling --------------------------------------------------------


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample x[B,C,H,W] at fractional (row, col) positions coords[B,L,2].

    Out-of-range coordinates are clamped to the border.  Differentiable with
    respect to both the feature map and the coordinates; the coordinate
    gradient is zeroed where clamping is active.
    """
    B, C, H, W = x.data.shape
    Bc, L, two = coords.data.shape
    if Bc != B or two != 2:
        raise ValueError(f"bilinear_sample: coords must be [B,L,2], got {coords.shape}")

    raw_r = coords.data[:, :, 0]
    raw_c = coords.data[:, :, 1]
    r = np.clip(raw_r, 0.0, H - 1)
    c = np.clip(raw_c, 0.0, W - 1)
    r0 = np.clip(np.floor(r), 0, max(H - 2, 0)).astype(np.intp)
    c0 = np.clip(np.floor(c), 0, max(W - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    wr = (r - r0).astype(x.data.dtype)
    wc = (c - c0).astype(x.data.dtype)

    bi = np.arange(B)[:, None]
    v00 = x.data[bi, :, r0, c0]  # [B, L, C]
    v01 = x.data[bi, :, r0, c1]
    v10 = x.data[bi, :, r1, c0]
    v11 = x.data[bi, :, r1, c1]

    wrE = wr[:, :, None]
    wcE = wc[:, :, None]
    out_blc = ((1 - wrE) * (1 - wcE) * v00 + (1 - wrE) * wcE * v01
               + wrE * (1 - wcE) * v10 + wrE * wcE * v11)
    out = np.ascontiguousarray(out_blc.transpose(0, 2, 1))  # [B, C, L]

    # clamp gate: zero coordinate gradient outside the valid range
    in_r = ((raw_r > 0.0) & (raw_r < H - 1)).astype(x.data.dtype)
    in_c = ((raw_c > 0.0) & (raw_c < W - 1)).astype(x.data.dtype)

    def backward(g):
        gl = g.transpose(0, 2, 1)  # [B, L, C]
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (bi, slice(None), r0, c0), (1 - wrE) * (1 - wcE) * gl)
            np.add.at(gx, (bi, slice(None), r0, c1), (1 - wrE) * wcE * gl)
            np.add.at(gx, (bi, slice(None), r1, c0), wrE * (1 - wcE) * gl)
            np.add.at(gx, (bi, slice(None), r1, c1), wrE * wcE * gl)
            x._accumulate(gx)
        if coords.requires_grad:
            dr = ((v10 - v00) * (1 - wcE) + (v11 - v01) * wcE)
            dc = ((v01 - v00) * (1 - wrE) + (v11 - v10) * wrE)
            gr = (gl * dr).sum(axis=2) * in_r
            gc = (gl * dc).sum(axis=2) * in_c
            coords._accumulate(np.stack([gr, gc], axis=2))

    return _make(out, (x, coords), backward)


# -- composite ops ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(x - Tensor(shift))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x - Tensor(shift)
    return z - log(exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xn = xc / sqrt(var + eps)
    return xn * gamma + beta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = (x + (x * x * x) * 0.044715) * _GELU_C
    return x * 0.5 * (tanh(inner) + 1.0)
