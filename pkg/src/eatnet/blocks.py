"""EAT block layers: MSRA, GLI, MD-MSA, vanilla MSA and the FFN.

Each layer owns its parameters and exposes a plain ``forward``.  Residual
coupling follows y = f(x) + x: MSRA applies its residual internally (it may
change resolution/channels), GLI and FFN are residual-wrapped by the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


# -- parameter container -------------------------------------------------------


class Module:
    """Minimal parameter container with named traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name if not prefix else f"{prefix}.{name}"), p
        for cname, child in self._children.items():
            sub = cname if not prefix else f"{prefix}.{cname}"
            yield from child.named_parameters(sub)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2.0 * std, 2.0 * std)


def fan_in_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / max(fan_in, 1))


# -- basic layers ---------------------------------------------------------------


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__()
        self.din, self.dout = din, dout
        w = np.zeros((dout, din)) if zero_init else trunc_normal(rng, (dout, din))
        self.weight = self.add_param("weight", Tensor(w))
        self.bias = self.add_param("bias", Tensor(np.zeros(dout)))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def flops(self, positions: int) -> int:
        return 2 * self.din * self.dout * positions


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, zero_init: bool = False):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError("channels must be divisible by groups")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.dilation, self.groups = (
            stride, padding, dilation, groups)
        shape = (cout, cin // groups, k, k)
        w = np.zeros(shape) if zero_init else fan_in_normal(rng, shape)
        self.weight = self.add_param("weight", Tensor(w))
        self.bias = self.add_param("bias", Tensor(np.zeros(cout)))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation,
                        groups=self.groups)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        def o(n):
            return (n + 2 * self.padding - self.dilation * (self.k - 1) - 1) // self.stride + 1
        return o(h), o(w)

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.out_hw(h, w)
        return 2 * self.cout * (self.cin // self.groups) * self.k * self.k * ho * wo


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.gamma = self.add_param("gamma", Tensor(np.ones(dim)))
        self.beta = self.add_param("beta", Tensor(np.zeros(dim)))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ChannelNorm(Module):
    """Per-channel normalization over spatial positions of a [B,C,H,W] map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.gamma = self.add_param("gamma", Tensor(np.ones(channels)))
        self.beta = self.add_param("beta", Tensor(np.zeros(channels)))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        xn = xc / T.sqrt(var + self.eps)
        g = self.gamma.reshape(1, self.channels, 1, 1)
        b = self.beta.reshape(1, self.channels, 1, 1)
        return xn * g + b


# -- configs --------------------------------------------------------------------


@dataclass(frozen=True)
class MSAConfig:
    embed_dim: int
    heads: int

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass(frozen=True)
class MSRAConfig:
    in_channels: int
    out_channels: int
    branch_specs: tuple = ((3, 1, 1), (3, 1, 2))  # (kernel, stride, dilation)
    fusion_kernel: int = 1

    def __post_init__(self):
        if not self.branch_specs:
            raise ValueError("MSRA needs at least one branch")
        strides = {s for (_, s, _) in self.branch_specs}
        if len(strides) != 1:
            raise ValueError("all MSRA branches must share a stride so their "
                             f"spatial extents agree, got strides {sorted(strides)}")
        for (k, s, d) in self.branch_specs:
            if k < 1 or s < 1 or d < 1:
                raise ValueError(f"bad branch spec {(k, s, d)}")
            if k % 2 == 0:
                raise ValueError("even branch kernels break the same-extent padding rule")
        if self.fusion_kernel % 2 == 0:
            raise ValueError("fusion kernel must be odd")

    @property
    def stride(self) -> int:
        return self.branch_specs[0][1]


@dataclass(frozen=True)
class GLIConfig:
    channels: int
    split_ratio: float
    local_kernel: int = 3
    heads: int = 1
    use_mdmsa: bool = False

    def __post_init__(self):
        if not 0.0 <= self.split_ratio <= 1.0:
            raise ValueError(f"split ratio must lie in [0,1], got {self.split_ratio}")
        if self.global_channels > 0 and self.global_channels % self.heads:
            raise ValueError(
                f"global channels {self.global_channels} not divisible by "
                f"heads {self.heads}")

    @property
    def global_channels(self) -> int:
        return int(round(self.split_ratio * self.channels))

    @property
    def local_channels(self) -> int:
        return self.channels - self.global_channels


@dataclass
class DeformField:
    """Query-predicted sampling offsets and modulation scalars."""
    offsets: Tensor      # [B, L, 2] fractional (row, col) offsets, unbounded
    modulation: Tensor   # [B, L, 1], each strictly inside (0, 1)


def wom_weights(alphas: Tensor) -> Tensor:
    """Weighted Operation Mixing: softmax over trainable branch logits."""
    return T.softmax(alphas, axis=-1)


def gli_param_formula(C: int, C_g: int, k: int) -> int:
    """Closed-form GLI parameter tally: 5*Cg^2 + (2 - 2C - k^2)*Cg + (k^2+2+C)*C."""
    if not 0 <= C_g <= C or k < 1:
        raise ValueError("need 0 <= C_g <= C and k >= 1")
    return 5 * C_g * C_g + (2 - 2 * C - k * k) * C_g + (k * k + 2 + C) * C


# -- attention -------------------------------------------------------------------


class MSA(Module):
    """Standard multi-head scaled dot-product self-attention."""

    def __init__(self, cfg: MSAConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.f_q = self.add_child("f_q", Linear(d, d, rng))
        self.f_k = self.add_child("f_k", Linear(d, d, rng))
        self.f_v = self.add_child("f_v", Linear(d, d, rng))
        self.f_o = self.add_child("f_o", Linear(d, d, rng))
        self.last_attn: np.ndarray | None = None  # detached, for diagnostics

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        h, hd = self.cfg.heads, self.cfg.head_dim
        return x.reshape(B, L, h, hd).transpose(0, 2, 1, 3)

    def _attend(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        if q_src.shape[-1] != self.cfg.embed_dim:
            raise ValueError(
                f"expected embed dim {self.cfg.embed_dim}, got {q_src.shape[-1]}")
        B, L, D = q_src.shape
        q = self._split_heads(self.f_q.forward(q_src))
        k = self._split_heads(self.f_k.forward(kv_src))
        v = self._split_heads(self.f_v.forward(kv_src))
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        attn = T.softmax(scores, axis=-1)
        self.last_attn = attn.data.copy()
        out = T.matmul(attn, v)                      # [B, h, L, hd]
        out = out.transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.f_o.forward(out)

    def forward(self, x: Tensor) -> Tensor:
        return self._attend(x, x)

    def flops(self, length: int) -> int:
        d = self.cfg.embed_dim
        proj = 4 * 2 * d * d * length
        attn = 2 * 2 * length * length * d
        return proj + attn


class MDMSA(MSA):
    """Modulated deformable attention.

    Keys and values come from the feature map resampled at query-predicted
    offsets and scaled by a sigmoid modulation; queries see the original map.
    With deform_enabled=False this is exactly the parent MSA on the same
    parameters.
    """

    def __init__(self, cfg: MSAConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        # zero-init: training starts at the vanilla-MSA point
        self.f_md = self.add_child("f_md", Linear(cfg.embed_dim, 3, rng,
                                                  zero_init=True))

    @staticmethod
    def base_grid(h: int, w: int, dtype) -> np.ndarray:
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=-1).astype(dtype)

    def forward(self, x: Tensor, hw: tuple[int, int] | None = None,
                deform_enabled: bool = True,
                modulation_override: float | None = None):
        if not deform_enabled:
            return self._attend(x, x), None
        if hw is None:
            raise ValueError("MD-MSA needs the (H, W) extents of the token grid")
        H, W = hw
        B, L, D = x.shape
        if L != H * W:
            raise ValueError(f"token count {L} != H*W = {H * W}")

        md = self.f_md.forward(self.f_q.forward(x))     # [B, L, 3]
        offsets = md[:, :, 0:2]
        modulation = T.sigmoid(md[:, :, 2:3])
        if not np.all(np.isfinite(offsets.data)):
            raise T.NumericError("MD-MSA produced non-finite offsets")
        field = DeformField(offsets=offsets, modulation=modulation)

        base = Tensor(np.broadcast_to(self.base_grid(H, W, x.data.dtype),
                                      (B, L, 2)).copy())
        coords = base + offsets
        xmap = x.transpose(0, 2, 1).reshape(B, D, H, W)
        sampled = T.bilinear_sample(xmap, coords)       # [B, D, L]
        x_hat = sampled.transpose(0, 2, 1)              # [B, L, D]
        if modulation_override is not None:
            x_hat = x_hat * float(modulation_override)
        else:
            x_hat = x_hat * modulation
        return self._attend(x, x_hat), field

    def flops(self, length: int) -> int:
        return super().flops(length) + 2 * self.cfg.embed_dim * 3 * length


# -- FFN --------------------------------------------------------------------------


class FFN(Module):
    """Position-wise two-layer perceptron with GELU between."""

    def __init__(self, dim: int, hidden_ratio: float, rng: np.random.Generator):
        super().__init__()
        if hidden_ratio <= 0:
            raise ValueError("hidden_ratio must be positive")
        hidden = max(1, int(round(dim * hidden_ratio)))
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))

    def flops(self, length: int) -> int:
        return self.fc1.flops(length) + self.fc2.flops(length)


# -- MSRA --------------------------------------------------------------------------


class MSRA(Module):
    """Multi-Scale Region Aggregation.

    Parallel strided/dilated convolutions over a normalized input, mixed by
    softmax weights (WOM), fused by a final convolution and residual-added.
    A strided 1x1 projection carries the residual across downsampling or
    channel changes.
    """

    def __init__(self, cfg: MSRAConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.norm = self.add_child("norm", ChannelNorm(cfg.in_channels))
        self.branches: list[Conv2d] = []
        for i, (k, s, d) in enumerate(cfg.branch_specs):
            conv = Conv2d(cfg.in_channels, cfg.out_channels, k, rng,
                          stride=s, padding=d * (k - 1) // 2, dilation=d)
            self.branches.append(self.add_child(f"branch{i}", conv))
        self.alphas = self.add_param(
            "alphas", Tensor(np.zeros(len(cfg.branch_specs))))
        fk = cfg.fusion_kernel
        self.fusion = self.add_child(
            "fusion", Conv2d(cfg.out_channels, cfg.out_channels, fk, rng,
                             padding=(fk - 1) // 2))
        self.shortcut: Conv2d | None = None
        if cfg.stride != 1 or cfg.in_channels != cfg.out_channels:
            self.shortcut = self.add_child(
                "shortcut", Conv2d(cfg.in_channels, cfg.out_channels, 1, rng,
                                   stride=cfg.stride))

    def forward(self, x: Tensor) -> Tensor:
        xn = self.norm.forward(x)
        w = wom_weights(self.alphas)
        mixed = None
        for i, conv in enumerate(self.branches):
            term = conv.forward(xn) * w[i]
            mixed = term if mixed is None else mixed + term
        out = self.fusion.forward(mixed)
        res = self.shortcut.forward(x) if self.shortcut is not None else x
        return out + res

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.branches[0].out_hw(h, w)

    def flops(self, h: int, w: int) -> int:
        total = sum(b.flops(h, w) for b in self.branches)
        ho, wo = self.out_hw(h, w)
        total += self.fusion.flops(ho, wo)
        if self.shortcut is not None:
            total += self.shortcut.flops(h, w)
        return total


# -- GLI ---------------------------------------------------------------------------


class GLI(Module):
    """Global and Local Interaction.

    Channels split into a local (depth-wise convolution) part and a global
    (attention) part; each path is scaled by its WOM weight, the outputs are
    concatenated and fused by a point-wise linear map.
    """

    def __init__(self, cfg: GLIConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cl, cg = cfg.local_channels, cfg.global_channels
        self.local_conv: Conv2d | None = None
        if cl > 0:
            self.local_conv = self.add_child(
                "local_conv", Conv2d(cl, cl, cfg.local_kernel, rng,
                                     padding=(cfg.local_kernel - 1) // 2,
                                     groups=cl))
        self.attn: MSA | None = None
        if cg > 0:
            acfg = MSAConfig(embed_dim=cg, heads=cfg.heads)
            self.attn = self.add_child(
                "attn", MDMSA(acfg, rng) if cfg.use_mdmsa else MSA(acfg, rng))
        self.alphas = self.add_param("alphas", Tensor(np.zeros(2)))  # (local, global)
        self.fusion = self.add_child("fusion",
                                     Linear(cfg.channels, cfg.channels, rng))

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        H, W = hw
        B, L, C = x.shape
        if L != H * W:
            raise ValueError(f"token count {L} != H*W = {H * W}")
        if C != self.cfg.channels:
            raise ValueError(f"expected {self.cfg.channels} channels, got {C}")
        w = wom_weights(self.alphas)
        parts = []
        cl = self.cfg.local_channels
        if self.local_conv is not None:
            xl = x[:, :, 0:cl].transpose(0, 2, 1).reshape(B, cl, H, W)
            yl = self.local_conv.forward(xl)
            yl = yl.reshape(B, cl, L).transpose(0, 2, 1)
            parts.append(yl * w[0])
        if self.attn is not None:
            xg = x[:, :, cl:C]
            if isinstance(self.attn, MDMSA):
                yg, _ = self.attn.forward(xg, hw)
            else:
                yg = self.attn.forward(xg)
            parts.append(yg * w[1])
        y = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
        return self.fusion.forward(y)

    def formula_params(self) -> int:
        return gli_param_formula(self.cfg.channels, self.cfg.global_channels,
                                 self.cfg.local_kernel)

    def flops(self, h: int, w: int) -> int:
        length = h * w
        total = self.fusion.flops(length)
        if self.local_conv is not None:
            total += self.local_conv.flops(h, w)
        if self.attn is not None:
            total += self.attn.flops(length)
        return total


# -- the full block ------------------------------------------------------------------


class EATBlock(Module):
    """MSRA -> GLI -> FFN, each residual-coupled (y = f(x) + x)."""

    def __init__(self, msra_cfg: MSRAConfig, gli_cfg: GLIConfig,
                 hidden_ratio: float, rng: np.random.Generator):
        super().__init__()
        if msra_cfg.out_channels != gli_cfg.channels:
            raise ValueError("MSRA output channels must match GLI channels")
        self.msra = self.add_child("msra", MSRA(msra_cfg, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(gli_cfg.channels))
        self.gli = self.add_child("gli", GLI(gli_cfg, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(gli_cfg.channels))
        self.ffn = self.add_child("ffn", FFN(gli_cfg.channels, hidden_ratio, rng))

    def forward(self, x: Tensor) -> Tensor:
        x = self.msra.forward(x)
        B, C, H, W = x.shape
        t = x.reshape(B, C, H * W).transpose(0, 2, 1)     # [B, L, C]
        t = t + self.gli.forward(self.norm1.forward(t), (H, W))
        t = t + self.ffn.forward(self.norm2.forward(t))
        return t.transpose(0, 2, 1).reshape(B, C, H, W)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.msra.out_hw(h, w)

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.out_hw(h, w)
        return (self.msra.flops(h, w) + self.gli.flops(ho, wo)
                + self.ffn.flops(ho * wo))
