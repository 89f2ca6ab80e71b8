"""Image-conditioned trajectory VAE.

The encoder maps a pixel-space grid ``[B, T, Gh, Gw, 2]`` and its image to a
Gaussian posterior over codes ``[B, T, Gh/r, Gw/r, D]``; the decoder maps a
code back to the mean trajectory grid. Time is never compressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .core import grid_anchors
from .imgenc import ImageEncoder, ImageEncoderConfig
from .layers import SIZES, FourierFeatures, ModelSize, Patchify, SpatioTemporalStack, Unpatchify, sincos_1d, sincos_2d

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


class DeadLatentChannelError(RuntimeError):
    pass


@dataclass
class VAEConfig:
    H: int = 64
    W: int = 64
    stride: int = 2
    T: int = 24
    patch: int = 2
    latent_channels: int = 8
    size: str = "T"
    n_bands: int = 8
    beta: float = 1e-6
    delta: float = 1.0
    predict_displacement: bool = True  # decoder head adds to the track anchors
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.stride, self.W // self.stride

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        Gh, Gw = self.grid
        return (self.T, Gh // self.patch, Gw // self.patch, self.latent_channels)

    def model_size(self) -> ModelSize:
        return SIZES[self.size]


@dataclass
class LatentPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor


@dataclass
class LatentStats:
    gamma: np.ndarray  # per-channel std of posterior means, [D]

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if np.any(self.gamma <= 0):
            raise ValueError("latent stds must be positive")


class TrajectoryVAE(nn.Module):
    def __init__(self, config: VAEConfig):
        super().__init__()
        self.config = config
        size = config.model_size()
        D, r = size.hidden, config.patch
        Gh, Gw = config.grid
        if Gh % r or Gw % r:
            raise ValueError(f"grid {Gh}x{Gw} not divisible by patch {r}")
        self.image_encoder = ImageEncoder(config.image, D)
        self.fourier = FourierFeatures(config.n_bands)
        self.enc_in = Patchify(self.fourier.out_dim, D, r)
        self.encoder = SpatioTemporalStack(size, "autoencoding")
        self.enc_head = nn.Linear(D, 2 * config.latent_channels)
        self.dec_in = nn.Linear(config.latent_channels, D)
        # query positions: the decoder sees where each track starts, not where it goes
        self.dec_fourier = FourierFeatures(config.n_bands)
        self.dec_pos = Patchify(self.dec_fourier.out_dim, D, r)
        self.decoder = SpatioTemporalStack(size, "autoencoding")
        self.dec_out = Unpatchify(D, 2, r)
        anchors = torch.as_tensor(grid_anchors(Gh, Gw, config.stride), dtype=torch.get_default_dtype())
        self.register_buffer("anchors_norm", self._normalize(anchors), persistent=False)

    def _normalize(self, px):
        scale = torch.tensor([2.0 / self.config.W, 2.0 / self.config.H], dtype=px.dtype, device=px.device)
        return px * scale - 1.0

    def _denormalize(self, x):
        scale = torch.tensor([self.config.W / 2.0, self.config.H / 2.0], dtype=x.dtype, device=x.device)
        return (x + 1.0) * scale

    def _positions(self, T, h, w, D, like):
        pos = sincos_2d(h, w, D, like.dtype)[None] + sincos_1d(T, D, like.dtype)[:, None, None]
        return pos.to(like.device)

    def image_tokens(self, images):
        f = self.image_encoder(images)
        if self.config.image.kind != "precomputed":
            ph, pw = self.image_encoder.n_tokens(self.config.H, self.config.W)
            f = f + sincos_2d(ph, pw, f.shape[-1], f.dtype).reshape(ph * pw, -1).to(f.device)
        return f

    def encode(self, x, images, f=None) -> LatentPosterior:
        """Posterior over codes for pixel grids ``x`` ``[B, T, Gh, Gw, 2]``."""
        f = self.image_tokens(images) if f is None else f
        tokens = self.enc_in(self.fourier(self._normalize(x)))
        B, T, h, w, D = tokens.shape
        tokens = tokens + self._positions(T, h, w, D, tokens)
        out = self.enc_head(self.encoder(tokens, f))
        mean, logvar = out.chunk(2, dim=-1)
        return LatentPosterior(mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode_normalized(self, z, images, f=None):
        f = self.image_tokens(images) if f is None else f
        tokens = self.dec_in(z)
        B, T, h, w, D = tokens.shape
        query = self.dec_pos(self.dec_fourier(self.anchors_norm.to(z.dtype))[None, None])
        tokens = tokens + query + sincos_1d(T, D, z.dtype).to(z.device)[:, None, None]
        out = self.dec_out(self.decoder(tokens, f))
        if self.config.predict_displacement:
            out = out + self.anchors_norm.to(out.dtype)
        return out

    def decode(self, z, images, f=None):
        """Mean reconstruction in pixels, ``[B, T, Gh, Gw, 2]``."""
        return self._denormalize(self.decode_normalized(z, images, f))


def reparameterize(post: LatentPosterior, noise) -> torch.Tensor:
    if noise.shape != post.mean.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} vs posterior {tuple(post.mean.shape)}")
    return post.mean + torch.exp(0.5 * post.logvar) * noise


def kl_to_standard_normal(post: LatentPosterior) -> torch.Tensor:
    """Element-mean of KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (post.mean ** 2 + post.logvar.exp() - post.logvar - 1).mean()


def huber(residual, delta: float = 1.0) -> torch.Tensor:
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta)).mean()


def beta_vae_loss(model: TrajectoryVAE, x, images, noise, beta: float | None = None):
    """Returns ``(total, recon, kl)``; reconstruction is scored in normalised coordinates."""
    beta = model.config.beta if beta is None else beta
    f = model.image_tokens(images)
    post = model.encode(x, images, f)
    z = reparameterize(post, noise)
    recon = huber(model.decode_normalized(z, images, f) - model._normalize(x), model.config.delta)
    kl = kl_to_standard_normal(post)
    return recon + beta * kl, recon, kl


def latent_interpolate(z_l, z_r, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if z_l.shape != z_r.shape:
        raise ValueError("latent codes differ in shape")
    return (1 - lam) * z_l + lam * z_r


class RunningChannelStats:
    """Streaming per-channel mean/variance (Chan et al. batch merge of Welford updates)."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, values) -> None:
        v = np.asarray(values, dtype=np.float64).reshape(-1, self.mean.size)
        nb = v.shape[0]
        if nb == 0:
            return
        mb = v.mean(0)
        m2b = ((v - mb) ** 2).sum(0)
        delta = mb - self.mean
        total = self.n + nb
        self.mean = self.mean + delta * nb / total
        self.m2 = self.m2 + m2b + delta ** 2 * self.n * nb / total
        self.n = total

    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / self.n)


def _finalize_gamma(gamma: np.ndarray, min_std: float) -> LatentStats:
    dead = np.flatnonzero(gamma < min_std)
    if dead.size:
        raise DeadLatentChannelError(f"latent channels {dead.tolist()} have std < {min_std}")
    return LatentStats(gamma)


def latent_stats_from_means(batches, min_std: float = 1e-8) -> LatentStats:
    """Per-channel std over every (sample, t, h, w) position of the posterior means."""
    acc = None
    for m in batches:
        m = np.asarray(m.detach().cpu() if isinstance(m, torch.Tensor) else m, dtype=np.float64)
        if acc is None:
            acc = RunningChannelStats(m.shape[-1])
        acc.update(m)
    if acc is None or acc.n == 0:
        raise ValueError("no latents to summarise")
    return _finalize_gamma(acc.std(), min_std)


def latent_stats_two_pass(means, min_std: float = 1e-8) -> LatentStats:
    """Reference: concatenate everything and use the two-pass formula."""
    v = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1, np.shape(m)[-1]) for m in means])
    return _finalize_gamma(np.sqrt(((v - v.mean(0)) ** 2).mean(0)), min_std)


@torch.no_grad()
def compute_latent_stats(model: TrajectoryVAE, pairs, min_std: float = 1e-8) -> LatentStats:
    """``pairs`` yields ``(x, images)`` batches; uses posterior means."""
    model.eval()
    return latent_stats_from_means(model.encode(x, images).mean for x, images in pairs)
