"""Training loops for the VAE and the denoiser, plus model (de)serialisation helpers."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import RunConfig, TrainConfig, _build, to_dict, vae_from_run
from .core import Dataset, SceneRecord
from .flow import (DenoiserConfig, MissingStatsError, TrajectoryGenerator, VelocityModel, latent_denoiser_config,
                   raw_mode_config, rf_loss, sample_timestep, seeded_generator)
from .metrics import kappa, lrtl
from .sim import splitmix64
from .vae import LatentStats, TrajectoryVAE, beta_vae_loss, latent_stats_from_means

log = logging.getLogger(__name__)


class NumericFailure(ArithmeticError):
    pass


# -- data -------------------------------------------------------------------------


def load_scenes(root, limit: int = 0) -> list[SceneRecord]:
    ds = Dataset(root)
    n = len(ds) if limit <= 0 else min(limit, len(ds))
    return [ds[i] for i in range(n)]


def training_pairs(scenes: list[SceneRecord], futures_per_scene: int = 1):
    """Arrays ``x [N, T, Gh, Gw, 2]`` and ``images [N, H, W, 3]``, one row per (scene, future)."""
    xs, ims = [], []
    for rec in scenes:
        n = rec.K if futures_per_scene <= 0 else min(futures_per_scene, rec.K)
        for k in range(n):
            xs.append(rec.futures[k])
            ims.append(rec.image)
    return np.stack(xs), np.stack(ims)


def split_scenes(scenes, n_val: int):
    if n_val <= 0:
        return scenes, []
    return scenes[:-n_val], scenes[-n_val:]


# -- models from configs / checkpoints ------------------------------------------------


def build_vae(cfg: RunConfig) -> TrajectoryVAE:
    return TrajectoryVAE(vae_from_run(cfg))


def build_denoiser(cfg: RunConfig, raw: bool = False) -> VelocityModel:
    vcfg = vae_from_run(cfg)
    d = cfg.denoiser
    dcfg = latent_denoiser_config(vcfg, patch=d.patch, size=d.size, image=d.image, flow=d.flow)
    if raw:
        dcfg = raw_mode_config(dcfg, vcfg.patch)
    return VelocityModel(dcfg)


def save_model(path, kind: str, model, cfg: RunConfig, step: int, stats: LatentStats | None = None,
               opt=None, extra: dict | None = None) -> None:
    tensors = ckpt_io.model_tensors(model)
    extra = dict(extra or {})
    if kind == "denoiser":
        extra["denoiser_config"] = json_safe(dataclasses.asdict(model.config))
    if opt is not None:
        ot, meta = ckpt_io.optimizer_tensors(opt)
        tensors.update(ot)
        extra["optimizer"] = meta
    ckpt_io.save_archive(ckpt_io.Checkpoint(kind=kind, config=to_dict(cfg), tensors=tensors,
                                            latent_stats=None if stats is None else stats.gamma.tolist(),
                                            step=step, extra=extra), path)


def json_safe(d):
    import json

    return json.loads(json.dumps(d))


def load_vae(path):
    from .config import from_dict

    ck = ckpt_io.load_archive(path)
    if ck.kind != "vae":
        raise ValueError(f"{path} holds a {ck.kind} checkpoint, not a VAE")
    cfg = from_dict(ck.config)
    model = build_vae(cfg).to(_dtype_of(ck))
    ckpt_io.restore_model(model, ck.tensors)
    stats = LatentStats(ck.latent_stats) if ck.latent_stats is not None else None
    return model, stats, cfg, ck


def load_denoiser(path):
    from .config import from_dict

    ck = ckpt_io.load_archive(path)
    if ck.kind != "denoiser":
        raise ValueError(f"{path} holds a {ck.kind} checkpoint, not a denoiser")
    cfg = from_dict(ck.config)
    dcfg = _build(DenoiserConfig, ck.extra["denoiser_config"], "denoiser_config")
    model = VelocityModel(dcfg).to(_dtype_of(ck))
    ckpt_io.restore_model(model, ck.tensors)
    stats = LatentStats(ck.latent_stats) if ck.latent_stats is not None else None
    return model, stats, cfg, ck


def _dtype_of(ck) -> torch.dtype:
    arr = next(v for k, v in ck.tensors.items() if k.startswith("model."))
    return torch.float64 if arr.dtype == np.float64 else torch.float32


# -- optimisation helpers ---------------------------------------------------------


def make_optimizer(model, tc: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    warm = max(tc.warmup_steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warm))
    return opt, sched


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng(splitmix64(seed, epoch)).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


class CurveWriter:
    def __init__(self, path, columns, append: bool = False):
        self.columns = columns
        new = not (append and Path(path).exists())
        self.fh = open(path, "a" if not new else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.w.writerow(columns)

    def row(self, **values):
        self.w.writerow([_fmt(values.get(c, "")) for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _check_finite(loss, step):
    value = loss.item()
    if not math.isfinite(value):
        raise NumericFailure(f"loss became {value} at step {step}")


# -- VAE ----------------------------------------------------------------------------


def train_vae(cfg: RunConfig, scenes: list[SceneRecord], out_dir, model: TrajectoryVAE | None = None,
              resume: str | None = None, dtype=torch.float32, val_scenes=None, on_step=None):
    """Train the VAE; writes ``vae_last.zip``, ``vae_best.zip`` and ``vae_curve.csv`` in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    torch.manual_seed(cfg.seed)
    model = (model or build_vae(cfg)).to(dtype)
    opt, sched = make_optimizer(model, tc)
    step = 0
    if resume:
        ck = ckpt_io.load_archive(resume)
        ckpt_io.restore_model(model, ck.tensors)
        ckpt_io.restore_optimizer(opt, ck.tensors, ck.extra["optimizer"])
        step = ck.step
        # the restored param groups already carry the lr for this step
        sched.last_epoch = step
    x_np, im_np = training_pairs(scenes, tc.futures_per_scene)
    x_all, im_all = torch.as_tensor(x_np, dtype=dtype), torch.as_tensor(im_np, dtype=dtype)
    val = training_pairs(val_scenes, 1) if val_scenes else None
    steps_per_epoch = math.ceil(len(x_all) / tc.batch_size)
    curve = CurveWriter(out / "vae_curve.csv", ["step", "epoch", "loss", "recon", "kl", "lr", "val_l1_px"],
                        append=bool(resume))
    best = math.inf
    latent_shape = model.config.latent_shape
    last_loss = None
    try:
        for epoch in range(step // steps_per_epoch, tc.vae_epochs):
            for b, idx in enumerate(_batches(len(x_all), tc.batch_size, cfg.seed, epoch)):
                if epoch * steps_per_epoch + b < step:
                    continue
                if tc.max_steps and step >= tc.max_steps:
                    break
                model.train()
                g = seeded_generator(splitmix64(cfg.seed, 1_000_000 + step))
                noise = torch.randn((len(idx),) + latent_shape, generator=g, dtype=dtype)
                total, recon, kl = beta_vae_loss(model, x_all[idx], im_all[idx], noise)
                _check_finite(total, step)
                opt.zero_grad(set_to_none=True)
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_grad)
                opt.step()
                sched.step()
                step += 1
                last_loss = total.item()
                curve.row(step=step, epoch=epoch, loss=total.item(), recon=recon.item(), kl=kl.item(),
                          lr=sched.get_last_lr()[0])
                if on_step:
                    on_step(step, model, total.item())
            val_l1 = validate_vae(model, *val, dtype=dtype) if val is not None else float("nan")
            curve.row(step=step, epoch=epoch, val_l1_px=val_l1)
            save_model(out / "vae_last.zip", "vae", model, cfg, step, opt=opt)
            if val is not None and val_l1 < best:
                best = val_l1
                save_model(out / "vae_best.zip", "vae", model, cfg, step)
            if tc.max_steps and step >= tc.max_steps:
                break
    finally:
        curve.close()
    stats = latent_stats_from_means(
        _encode_means(model, x_all[i:i + 16], im_all[i:i + 16]) for i in range(0, len(x_all), 16))
    save_model(out / "vae_last.zip", "vae", model, cfg, step, stats=stats, opt=opt)
    if val is None or not (out / "vae_best.zip").exists():
        save_model(out / "vae_best.zip", "vae", model, cfg, step, stats=stats)
    else:
        best_model, _, _, ck = load_vae(out / "vae_best.zip")
        best_stats = latent_stats_from_means(
            _encode_means(best_model, x_all[i:i + 16].to(_dtype_of(ck)), im_all[i:i + 16].to(_dtype_of(ck)))
            for i in range(0, len(x_all), 16))
        save_model(out / "vae_best.zip", "vae", best_model, cfg, ck.step, stats=best_stats)
    return model, stats, last_loss


@torch.no_grad()
def _encode_means(model, x, im):
    model.eval()
    return model.encode(x, im).mean


@torch.no_grad()
def validate_vae(model, x_np, im_np, dtype=torch.float32, batch: int = 8) -> float:
    """Mean absolute reconstruction error in pixels using posterior means."""
    model.eval()
    errs = []
    for i in range(0, len(x_np), batch):
        x = torch.as_tensor(x_np[i:i + batch], dtype=dtype)
        im = torch.as_tensor(im_np[i:i + batch], dtype=dtype)
        errs.append((model.decode(model.encode(x, im).mean, im) - x).abs().mean(dim=(1, 2, 3, 4)))
    return float(torch.cat(errs).mean())


@torch.no_grad()
def reconstruction_errors(model, x, im) -> tuple[float, float]:
    """Posterior-mean reconstruction: mean Euclidean distance (px) and mean per-future MSE (px^2)."""
    model.eval()
    d = model.decode(model.encode(x, im).mean, im) - x
    return float(d.norm(dim=-1).mean()), float(d.pow(2).sum(-1).mean(dim=(1, 2, 3)).mean())


def reconstruction_error_px(model, x, im) -> float:
    return reconstruction_errors(model, x, im)[0]


# -- denoiser -----------------------------------------------------------------------


@torch.no_grad()
def flow_targets(generator: TrajectoryGenerator, x, im, batch: int = 16):
    out = []
    for i in range(0, len(x), batch):
        out.append(generator.to_state(x[i:i + batch], im[i:i + batch]))
    return torch.cat(out)


def probe_metrics(generator: TrajectoryGenerator, probe: list[SceneRecord], K: int, seed: int, steps: int):
    ks, ls = [], []
    for i, rec in enumerate(probe):
        samples = generator.generate(rec.image, K, seeded_generator(splitmix64(seed, 2_000_000 + i)), steps)
        ks.append(kappa(samples))
        if (rec.masks >= 1).any():
            ls.append(np.mean([lrtl(s, rec.masks) for s in samples]))
    return float(np.mean(ks)), float(np.mean(ls)) if ls else 0.0


def train_denoiser(cfg: RunConfig, scenes: list[SceneRecord], out_dir, vae: TrajectoryVAE | None = None,
                   stats: LatentStats | None = None, raw: bool = False, resume: str | None = None,
                   dtype=torch.float32, probe: list[SceneRecord] | None = None, prefix: str = "denoiser",
                   val_scenes=None):
    """Train the velocity model on flow states of the training futures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    if not raw and (vae is None or stats is None):
        raise MissingStatsError("latent-mode denoiser training needs a VAE checkpoint with latent stats")
    torch.manual_seed(cfg.seed + 1)
    model = build_denoiser(cfg, raw=raw).to(dtype)
    if vae is not None:
        vae = vae.to(dtype).eval()
        vae.requires_grad_(False)
    gen = TrajectoryGenerator(model, None if raw else vae, None if raw else stats)
    opt, sched = make_optimizer(model, tc)
    step = 0
    if resume:
        ck = ckpt_io.load_archive(resume)
        ckpt_io.restore_model(model, ck.tensors)
        ckpt_io.restore_optimizer(opt, ck.tensors, ck.extra["optimizer"])
        step = ck.step
        # the restored param groups already carry the lr for this step
        sched.last_epoch = step
    x_np, im_np = training_pairs(scenes, tc.futures_per_scene)
    x_all, im_all = torch.as_tensor(x_np, dtype=dtype), torch.as_tensor(im_np, dtype=dtype)
    z_all = flow_targets(gen, x_all, im_all)
    steps_per_epoch = math.ceil(len(z_all) / tc.batch_size)
    curve = CurveWriter(out / f"{prefix}_curve.csv", ["step", "epoch", "loss", "lr", "kappa", "lrtl", "val_best_of_k"],
                        append=bool(resume))
    flow = model.config.flow
    best = math.inf
    last_loss = None
    try:
        for epoch in range(step // steps_per_epoch, tc.denoiser_epochs):
            for b, idx in enumerate(_batches(len(z_all), tc.batch_size, cfg.seed + 7, epoch)):
                if epoch * steps_per_epoch + b < step:
                    continue
                if tc.max_steps and step >= tc.max_steps:
                    break
                model.train()
                g = seeded_generator(splitmix64(cfg.seed, 3_000_000 + step))
                z1 = z_all[idx]
                z0 = torch.randn(z1.shape, generator=g, dtype=dtype)
                t = sample_timestep(g, len(idx), flow.t_loc, flow.t_scale, dtype)
                loss = rf_loss(model, z1, im_all[idx], z0=z0, t=t)
                _check_finite(loss, step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_grad)
                opt.step()
                sched.step()
                step += 1
                last_loss = loss.item()
                curve.row(step=step, epoch=epoch, loss=loss.item(), lr=sched.get_last_lr()[0])
            row = {"step": step, "epoch": epoch}
            if probe:
                row["kappa"], row["lrtl"] = probe_metrics(gen, probe, tc.probe_K, cfg.seed, flow.steps)
            if val_scenes:
                row["val_best_of_k"] = validate_best_of_k(gen, val_scenes, cfg)
            curve.row(**row)
            save_model(out / f"{prefix}_last.zip", "denoiser", model, cfg, step, stats=None if raw else stats, opt=opt)
            if val_scenes and row["val_best_of_k"] < best:
                best = row["val_best_of_k"]
                save_model(out / f"{prefix}_best.zip", "denoiser", model, cfg, step, stats=None if raw else stats)
            if tc.max_steps and step >= tc.max_steps:
                break
    finally:
        curve.close()
    if not val_scenes:
        save_model(out / f"{prefix}_best.zip", "denoiser", model, cfg, step, stats=None if raw else stats)
    return model, last_loss


def validate_best_of_k(gen: TrajectoryGenerator, scenes, cfg: RunConfig) -> float:
    from .metrics import best_of_k

    vals = []
    for i, rec in enumerate(scenes):
        samples = gen.generate(rec.image, cfg.eval.K, seeded_generator(splitmix64(cfg.seed, 4_000_000 + i)),
                               cfg.sample.steps)
        vals.append(best_of_k(list(samples), rec.futures, cfg.eval.pairing))
    return float(np.mean(vals))
