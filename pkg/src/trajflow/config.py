"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .flow import FlowConfig
from .imgenc import ImageEncoderConfig
from .sim import WorldConfig
from .vae import VAEConfig


class ConfigError(ValueError):
    pass


@dataclass
class SimSection(WorldConfig):
    n_scenes: int = 16


@dataclass
class DenoiserSection:
    size: str = "T"
    patch: int = 1
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)


@dataclass
class TrainConfig:
    """Optimiser settings follow the paper's tables (AdamW, lr 6e-5, linear warm-up, clip 1.0)."""

    vae_epochs: int = 20
    denoiser_epochs: int = 20
    batch_size: int = 4
    lr: float = 6e-5
    weight_decay: float = 0.01
    warmup_steps: int = 100
    clip_grad: float = 1.0
    futures_per_scene: int = 1  # one observed future per initial condition
    val_scenes: int = 0
    probe_scenes: int = 4
    probe_K: int = 8
    max_steps: int = 0  # 0 = no cap


@dataclass
class SampleConfig:
    K: int = 8
    steps: int = 10


@dataclass
class EvalConfig:
    K: int = 8
    n_scenes: int = 0  # 0 = all
    pairing: str = "coverage"


@dataclass
class RunConfig:
    sim: SimSection = field(default_factory=SimSection)
    vae: VAEConfig = field(default_factory=VAEConfig)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs"

    def world(self) -> WorldConfig:
        d = to_dict(self.sim)
        d.pop("n_scenes")
        return WorldConfig(**d)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return from_dict(json.loads(Path(path).read_text()))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def vae_from_run(cfg: RunConfig) -> VAEConfig:
    """The VAE section with image geometry taken from the simulator section."""
    return dataclasses.replace(cfg.vae, H=cfg.sim.H, W=cfg.sim.W, stride=cfg.sim.stride, T=cfg.sim.T)
