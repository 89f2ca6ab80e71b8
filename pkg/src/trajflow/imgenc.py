"""Image tokenisers that turn an ``[H, W, 3]`` image into ``[(H/p)*(W/p), D]`` tokens.

``patch-linear`` embeds each ``p x p`` patch independently. ``patch-conv-small``
runs a short stride-2 conv stack before a linear projection. Both see pixels
centred to [-1, 1] and RMS-normalise each token, so patches that differ from a
flat background stay distinguishable after the conv stack shrinks the signal.
``precomputed`` projects externally computed token files (ITOK format) to the
model width.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import FormatError, TruncationError
from .layers import RMSNorm

TOKEN_MAGIC = b"ITOK"
TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sIII")


@dataclass
class ImageEncoderConfig:
    patch: int = 8
    kind: str = "patch-conv-small"
    channels: int = 32
    frozen: bool = False
    token_dim: int = 0  # input width of precomputed tokens


class ImageEncoder(nn.Module):
    def __init__(self, config: ImageEncoderConfig, dim: int):
        super().__init__()
        self.config = config
        p = config.patch
        if config.kind == "patch-linear":
            self.net = nn.Conv2d(3, dim, kernel_size=p, stride=p)
        elif config.kind == "patch-conv-small":
            n = int(round(math.log2(p)))
            if 2 ** n != p:
                raise ValueError("patch-conv-small needs a power-of-two patch size")
            layers, c_in = [], 3
            for _ in range(n):
                layers += [nn.Conv2d(c_in, config.channels, 3, stride=2, padding=1), nn.GELU()]
                c_in = config.channels
            self.net = nn.Sequential(*layers)
            self.head = nn.Linear(config.channels, dim)
        elif config.kind == "precomputed":
            if config.token_dim <= 0:
                raise ValueError("precomputed tokens need token_dim")
            self.head = nn.Linear(config.token_dim, dim)
        else:
            raise ValueError(f"unknown image encoder kind {config.kind!r}")
        if config.kind != "precomputed":
            self.norm = RMSNorm(dim)
        if config.frozen:
            self.requires_grad_(False)

    def forward(self, images):
        """``images``: ``[B, H, W, 3]`` in [0, 1], or ``[B, M, token_dim]`` when precomputed."""
        if self.config.kind == "precomputed":
            return self.head(images)
        B, H, W, _ = images.shape
        p = self.config.patch
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        y = self.net(2.0 * images.permute(0, 3, 1, 2) - 1.0)
        y = y.flatten(2).transpose(1, 2)  # [B, M, C], row-major patches
        if self.config.kind == "patch-conv-small":
            y = self.head(y)
        return self.norm(y)

    def n_tokens(self, H: int, W: int) -> tuple[int, int]:
        return H // self.config.patch, W // self.config.patch


def encode_image(image, encoder: ImageEncoder) -> torch.Tensor:
    """Tokens ``[M, D]`` for a single ``[H, W, 3]`` image."""
    x = torch.as_tensor(np.asarray(image), dtype=next(encoder.parameters()).dtype)
    return encoder(x[None])[0]


def write_tokens(tokens, path) -> None:
    tokens = np.asarray(tokens, dtype="<f4")
    if tokens.ndim != 2:
        raise ValueError("tokens must be [n_tokens, dim]")
    n, d = tokens.shape
    Path(path).write_bytes(_TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, n, d) + tokens.tobytes())


def read_tokens(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _TOKEN_HEADER.size:
        raise TruncationError("token file shorter than its header")
    magic, version, n, d = _TOKEN_HEADER.unpack_from(buf)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"bad token magic {magic!r}")
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported token version {version}")
    payload = buf[_TOKEN_HEADER.size:]
    if len(payload) != n * d * 4:
        raise TruncationError(f"token payload has {len(payload)} bytes, header implies {n * d * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
