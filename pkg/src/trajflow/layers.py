"""Transformer building blocks shared by the trajectory encoder, decoder and denoiser.

Token tensors are ``[B, T, h, w, D]``. A spatial block attends over the ``h*w``
tokens of one frame, a temporal block over the ``T`` tokens of one cell; both
cross-attend to image tokens ``[B, M, D]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-6


@dataclass(frozen=True)
class ModelSize:
    n_blocks: int
    hidden: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.n_blocks % 2:
            raise ValueError("block count must be even (spatial/temporal pairs)")


SIZES = {
    "T": ModelSize(4, 64, 2),
    "S": ModelSize(8, 192, 3),
    "B": ModelSize(12, 384, 6),
    "L": ModelSize(16, 768, 12),
}


def rms_norm(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim)) if affine else None

    def forward(self, x):
        y = rms_norm(x, self.eps)
        return y * self.weight if self.weight is not None else y


def qk_norm_attention(q, k, v, n_heads: int, q_scale=None, k_scale=None, eps: float = EPS):
    """Multi-head attention with RMS-normalised queries and keys.

    ``q`` is ``[..., L, D]``, ``k`` and ``v`` are ``[..., M, D]`` (leading dims
    broadcast). Returns the concatenated heads, ``[..., L, D]``, before any
    output projection.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] % n_heads:
        raise ValueError(f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    dh = q.shape[-1] // n_heads

    def heads(x):
        return x.unflatten(-1, (n_heads, dh)).transpose(-2, -3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    qh = rms_norm(qh, eps)
    kh = rms_norm(kh, eps)
    if q_scale is not None:
        qh = qh * q_scale
    if k_scale is not None:
        kh = kh * k_scale
    att = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    return (att @ vh).transpose(-2, -3).flatten(-2)


class Attention(nn.Module):
    """Self- or cross-attention with QK normalisation."""

    def __init__(self, dim: int, n_heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(context_dim, dim)
        self.v = nn.Linear(context_dim, dim)
        self.out = nn.Linear(dim, dim)
        self.q_scale = nn.Parameter(torch.ones(dim // n_heads))
        self.k_scale = nn.Parameter(torch.ones(dim // n_heads))

    def forward(self, x, context=None):
        context = x if context is None else context
        y = qk_norm_attention(self.q(x), self.k(context), self.v(context), self.n_heads,
                              self.q_scale, self.k_scale)
        return self.out(y)


def gated_cross_attention(h, f, gate, attn: Attention, query=None):
    """``h + gate * CrossAttn(q=query, kv=f)``; the query defaults to ``h``."""
    return h + gate * attn(h if query is None else query, f)


def modulate(h, shift, scale):
    return shift + (1 + scale) * rms_norm(h)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


N_MOD = 9  # (shift, scale, gate) for self-attention, cross-attention and MLP


class Block(nn.Module):
    """Self-attention, gated image cross-attention and MLP, each adaptively modulated.

    ``kind="denoising"`` regresses the nine modulation vectors from a
    conditioning vector; ``kind="autoencoding"`` learns them as constants.
    All gates start at zero, so a fresh block is the identity.
    """

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0, kind: str = "autoencoding",
                 axis: str = "spatial"):
        super().__init__()
        if kind not in ("denoising", "autoencoding"):
            raise ValueError(f"unknown block kind {kind!r}")
        if axis not in ("spatial", "temporal"):
            raise ValueError(f"unknown axis {axis!r}")
        self.kind, self.axis, self.dim = kind, axis, dim
        self.attn = Attention(dim, n_heads)
        self.cross = Attention(dim, n_heads)
        self.mlp = Mlp(dim, mlp_ratio)
        if kind == "denoising":
            self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, N_MOD * dim))
            nn.init.zeros_(self.ada[1].weight)
            nn.init.zeros_(self.ada[1].bias)
        else:
            self.mod = nn.Parameter(torch.zeros(N_MOD, dim))

    def modulation(self, c=None, batch: int = 1):
        """Nine ``[B, 1, 1, D]`` tensors: shift/scale/gate for each sub-layer."""
        if self.kind == "denoising":
            if c is None:
                raise ValueError("denoising block needs a conditioning vector")
            m = self.ada(c).view(c.shape[0], N_MOD, 1, 1, self.dim)
        else:
            m = self.mod.view(1, N_MOD, 1, 1, self.dim).expand(batch, -1, -1, -1, -1)
        return m.unbind(1)

    def forward(self, h, f, c=None):
        """``h``: ``[B, T, N, D]`` tokens, ``f``: ``[B, M, D]`` image tokens."""
        if self.axis == "temporal":
            h = h.transpose(1, 2)
        sa_shift, sa_scale, sa_gate, ca_shift, ca_scale, ca_gate, mlp_shift, mlp_scale, mlp_gate = \
            self.modulation(c, h.shape[0])
        h = h + sa_gate * self.attn(modulate(h, sa_shift, sa_scale))
        h = gated_cross_attention(h, f.unsqueeze(1), ca_gate, self.cross, query=modulate(h, ca_shift, ca_scale))
        h = h + mlp_gate * self.mlp(modulate(h, mlp_shift, mlp_scale))
        if self.axis == "temporal":
            h = h.transpose(1, 2)
        return h


class SpatioTemporalStack(nn.Module):
    """Alternating spatial/temporal blocks followed by a final RMSNorm."""

    def __init__(self, size: ModelSize, kind: str = "autoencoding"):
        super().__init__()
        self.kind = kind
        self.blocks = nn.ModuleList(
            Block(size.hidden, size.heads, size.mlp_ratio, kind, "spatial" if i % 2 == 0 else "temporal")
            for i in range(size.n_blocks)
        )
        self.norm = RMSNorm(size.hidden)

    def forward(self, tokens, f, c=None):
        B, T, h, w, D = tokens.shape
        x = tokens.reshape(B, T, h * w, D)
        for block in self.blocks:
            x = block(x, f, c)
        return self.norm(x).reshape(B, T, h, w, D)


def sinusoidal_time_embedding(t, dim: int, max_freq: float = 1e4):
    """``concat(sin(t * w), cos(t * w))`` with ``dim/2`` frequencies log-spaced in [1, max_freq]."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(torch.arange(half, dtype=torch.float64) / (half - 1) * math.log(max_freq))
    args = t.to(torch.float64)[..., None] * freqs
    out = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return out.to(t.dtype if t.is_floating_point() else torch.get_default_dtype())


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(sinusoidal_time_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class FourierFeatures(nn.Module):
    """``concat(x, sin(2 pi x B), cos(2 pi x B))`` with a learnable per-axis frequency matrix."""

    def __init__(self, n_bands: int = 8, f_min: float = 1.0, f_max: float = 32.0):
        super().__init__()
        freqs = torch.logspace(math.log10(f_min), math.log10(f_max), n_bands)
        self.B = nn.Parameter(freqs.repeat(2, 1))
        self.n_bands = n_bands

    @property
    def out_dim(self) -> int:
        return 2 + 4 * self.n_bands

    def forward(self, coords):
        proj = 2 * math.pi * coords[..., :, None] * self.B  # [..., 2, n_bands]
        return torch.cat([coords, torch.sin(proj).flatten(-2), torch.cos(proj).flatten(-2)], dim=-1)


def fourier_features(coords, B):
    proj = 2 * math.pi * coords[..., :, None] * B
    return torch.cat([coords, torch.sin(proj).flatten(-2), torch.cos(proj).flatten(-2)], dim=-1)


class Patchify(nn.Module):
    """Per-frame non-overlapping ``r x r`` patch embedding: ``[B, T, Gh, Gw, C] -> [B, T, Gh/r, Gw/r, D]``."""

    def __init__(self, in_channels: int, dim: int, r: int):
        super().__init__()
        self.r = r
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=r, stride=r)

    def forward(self, x):
        B, T, Gh, Gw, C = x.shape
        if Gh % self.r or Gw % self.r:
            raise ValueError(f"grid {Gh}x{Gw} not divisible by patch size {self.r}")
        y = self.proj(x.reshape(B * T, Gh, Gw, C).permute(0, 3, 1, 2))
        return y.permute(0, 2, 3, 1).reshape(B, T, Gh // self.r, Gw // self.r, -1)


class Unpatchify(nn.Module):
    """Linear map from each token to an ``r x r`` patch of ``out_channels`` values."""

    def __init__(self, dim: int, out_channels: int, r: int, zero_init: bool = True):
        super().__init__()
        self.r, self.c = r, out_channels
        self.proj = nn.Linear(dim, out_channels * r * r)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        B, T, h, w, _ = x.shape
        y = self.proj(x).view(B, T, h, w, self.c, self.r, self.r)
        return y.permute(0, 1, 2, 5, 3, 6, 4).reshape(B, T, h * self.r, w * self.r, self.c)


def sincos_1d(n: int, dim: int, dtype=None):
    pos = torch.arange(n, dtype=torch.float64)
    omega = 1.0 / 10000 ** (torch.arange(dim // 2, dtype=torch.float64) / (dim / 2))
    out = pos[:, None] * omega[None]
    return torch.cat([torch.sin(out), torch.cos(out)], dim=1).to(dtype or torch.get_default_dtype())


def sincos_2d(h: int, w: int, dim: int, dtype=None):
    """Fixed 2D position code ``[h, w, dim]``: half the channels for rows, half for columns."""
    rows = sincos_1d(h, dim // 2, dtype)[:, None, :].expand(h, w, -1)
    cols = sincos_1d(w, dim // 2, dtype)[None, :, :].expand(h, w, -1)
    return torch.cat([rows, cols], dim=-1)
