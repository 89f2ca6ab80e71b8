"""Rectified-flow denoiser, training objective and Euler sampler.

In latent mode the flow state is a VAE code divided by the per-channel
training std ``gamma``; in raw mode it is the normalised trajectory grid
itself, patchified coarser so both variants see the same token grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .imgenc import ImageEncoder, ImageEncoderConfig
from .layers import SIZES, Patchify, SpatioTemporalStack, TimestepEmbedder, Unpatchify, sincos_1d, sincos_2d
from .vae import LatentStats, TrajectoryVAE


class DivergenceError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state after Euler step {step}")
        self.step = step


class MissingStatsError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    steps: int = 10
    integrator: str = "euler"
    t_loc: float = 0.0
    t_scale: float = 1.0
    mode: str = "latent"  # or "raw"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one sampling step")
        if self.integrator != "euler":
            raise ValueError("only fixed-step Euler is supported")
        if self.mode not in ("latent", "raw"):
            raise ValueError(f"unknown flow mode {self.mode!r}")


@dataclass
class DenoiserConfig:
    """Shape of the flow state ``[T, Gh, Gw, C]`` and the transformer that models it."""

    T: int = 24
    Gh: int = 16
    Gw: int = 16
    channels: int = 8
    patch: int = 1
    size: str = "T"
    H: int = 64
    W: int = 64
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    @property
    def tokens(self) -> tuple[int, int, int]:
        return (self.T, self.Gh // self.patch, self.Gw // self.patch)


def latent_denoiser_config(vae_config, **kw) -> DenoiserConfig:
    T, h, w, D = vae_config.latent_shape
    return DenoiserConfig(T=T, Gh=h, Gw=w, channels=D, H=vae_config.H, W=vae_config.W, **kw)


def raw_mode_config(latent: DenoiserConfig, vae_patch: int) -> DenoiserConfig:
    """Raw-coordinate variant with the same token grid as ``latent``."""
    patch = latent.patch * vae_patch
    Gh, Gw = latent.Gh * vae_patch, latent.Gw * vae_patch
    if Gh % patch or Gw % patch:
        raise ValueError("adjusted patch size does not tile the trajectory grid")
    return replace(latent, Gh=Gh, Gw=Gw, channels=2, patch=patch, flow=replace(latent.flow, mode="raw"))


class VelocityModel(nn.Module):
    """``v(z_t, image, t)`` with the output shaped like the input state."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        size = SIZES[config.size]
        D = size.hidden
        self.image_encoder = ImageEncoder(config.image, D)
        self.t_embed = TimestepEmbedder(D)
        self.proj_in = Patchify(config.channels, D, config.patch)
        self.stack = SpatioTemporalStack(size, "denoising")
        self.proj_out = Unpatchify(D, config.channels, config.patch)

    def image_tokens(self, images):
        f = self.image_encoder(images)
        if self.config.image.kind != "precomputed":
            ph, pw = self.image_encoder.n_tokens(self.config.H, self.config.W)
            f = f + sincos_2d(ph, pw, f.shape[-1], f.dtype).reshape(ph * pw, -1).to(f.device)
        return f

    def forward(self, z, images, t, f=None):
        f = self.image_tokens(images) if f is None else f
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device).expand(z.shape[0])
        tokens = self.proj_in(z)
        B, T, h, w, D = tokens.shape
        pos = sincos_2d(h, w, D, z.dtype)[None] + sincos_1d(T, D, z.dtype)[:, None, None]
        return self.proj_out(self.stack(tokens + pos.to(z.device), f, self.t_embed(t)))


def interpolate_path(z0, z1, t):
    t = torch.as_tensor(t, dtype=z0.dtype, device=z0.device)
    t = t.reshape(t.shape + (1,) * (z0.dim() - t.dim())) if t.dim() else t
    return (1 - t) * z0 + t * z1


def target_velocity(z0, z1):
    return z1 - z0


def sample_timestep(generator: torch.Generator | None, n: int, loc: float = 0.0, scale: float = 1.0,
                    dtype=None):
    """Logit-normal draws: ``sigmoid(loc + scale * N(0, 1))``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    eps = torch.randn(n, generator=generator, dtype=dtype or torch.get_default_dtype())
    return torch.sigmoid(loc + scale * eps)


def rf_loss(model, z1, images, z0=None, t=None, generator=None, flow: FlowConfig | None = None):
    """Mean squared error between predicted and straight-path velocities."""
    flow = flow or FlowConfig()
    if z0 is None:
        z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    if t is None:
        t = sample_timestep(generator, z1.shape[0], flow.t_loc, flow.t_scale, z1.dtype)
    zt = interpolate_path(z0, z1, t)
    return ((model(zt, images, t) - target_velocity(z0, z1)) ** 2).mean()


@torch.no_grad()
def euler_sample(velocity, images, z0, steps: int = 10):
    """Integrate ``dz/dt = velocity(z, images, t)`` from t=0 to 1 with left-endpoint Euler."""
    if steps < 1:
        raise ValueError("need at least one step")
    z = z0
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((z.shape[0],), k / steps, dtype=z.dtype)
        z = z + dt * velocity(z, images, t)
        if not torch.isfinite(z).all():
            raise DivergenceError(k)
    return z


class TrajectoryGenerator:
    """Noise -> flow state -> trajectory grid in pixels."""

    def __init__(self, denoiser: VelocityModel, vae: TrajectoryVAE | None = None,
                 stats: LatentStats | None = None):
        self.denoiser = denoiser
        self.vae = vae
        self.mode = denoiser.config.flow.mode
        if self.mode == "latent":
            if vae is None:
                raise ValueError("latent mode needs a VAE")
            if stats is None:
                raise MissingStatsError("latent mode needs latent statistics (gamma)")
            self.gamma = torch.as_tensor(stats.gamma)
        self.stats = stats

    def _dtype(self):
        return next(self.denoiser.parameters()).dtype

    def to_state(self, x_px, images):
        """Encode pixel grids to the flow state (posterior mean / gamma, or normalised coords)."""
        cfg = self.denoiser.config
        if self.mode == "raw":
            scale = torch.tensor([2.0 / cfg.W, 2.0 / cfg.H], dtype=x_px.dtype)
            return x_px * scale - 1.0
        return self.vae.encode(x_px, images).mean / self.gamma.to(x_px.dtype)

    def from_state(self, z, images):
        cfg = self.denoiser.config
        if self.mode == "raw":
            scale = torch.tensor([cfg.W / 2.0, cfg.H / 2.0], dtype=z.dtype)
            return (z + 1.0) * scale
        return self.vae.decode(z * self.gamma.to(z.dtype), images)

    @torch.no_grad()
    def generate(self, image, K: int, generator: torch.Generator | None = None, steps: int | None = None,
                 noise=None) -> np.ndarray:
        """``K`` pixel-space grids ``[K, T, Gh, Gw, 2]`` for one ``[H, W, 3]`` image."""
        if K < 1:
            raise ValueError("K must be at least 1")
        cfg = self.denoiser.config
        dtype = self._dtype()
        steps = cfg.flow.steps if steps is None else steps
        images = torch.as_tensor(np.asarray(image), dtype=dtype)[None].expand(K, -1, -1, -1)
        if noise is None:
            noise = torch.randn((K, cfg.T, cfg.Gh, cfg.Gw, cfg.channels), generator=generator, dtype=dtype)
        self.denoiser.eval()
        if self.vae is not None:
            self.vae.eval()
        f = self.denoiser.image_tokens(images[:1]).expand(K, -1, -1)
        z1 = euler_sample(lambda z, im, t: self.denoiser(z, im, t, f=f), images, noise, steps)
        return self.from_state(z1, images).cpu().numpy()


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & ((1 << 63) - 1))
    return g
