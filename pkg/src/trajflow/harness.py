"""Experiment commands behind the CLI. Each ``cmd_*`` writes into its own output directory."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config
from .core import Dataset, SceneRecord, ValidationError, read_scene, static_grid, write_grid
from .flow import TrajectoryGenerator, seeded_generator
from .metrics import (FeatureConfig, best_of_k, build_report, fvmd_scene, score_scene,
                      write_scene_csv)
from .render import write_overlay
from .sim import generate_dataset, splitmix64
from .train import (load_denoiser, load_scenes, load_vae, reconstruction_errors, split_scenes, train_denoiser,
                    train_vae)

log = logging.getLogger(__name__)


def _prepare_out(out, allow_existing: bool = True) -> Path:
    out = Path(out)
    if not allow_existing and out.exists() and any(out.iterdir()):
        raise FileExistsError(f"refusing to write into non-empty directory {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: RunConfig, out, workers: int = 1):
    manifest = generate_dataset(cfg.world(), cfg.sim.n_scenes, out, master_seed=cfg.seed, workers=workers)
    print(f"wrote {len(manifest.scenes)} scenes x {manifest.K} futures "
          f"(T={manifest.T}, grid {manifest.Gh}x{manifest.Gw}, stride {manifest.s}) to {out}")
    return manifest


def cmd_train_vae(cfg: RunConfig, data, out, dtype=torch.float32):
    out = _prepare_out(out)
    dump_config(cfg, out / "config.json")
    scenes = load_scenes(data)
    train, val = split_scenes(scenes, cfg.train.val_scenes)
    model, stats, loss = train_vae(cfg, train, out, dtype=dtype, val_scenes=val or None)
    print(f"vae: final loss {loss:.4g}, gamma {np.round(stats.gamma, 4).tolist()}")
    return out / "vae_best.zip"


def cmd_train_denoiser(cfg: RunConfig, data, vae_ckpt, out, raw: bool = False, dtype=torch.float32):
    out = _prepare_out(out)
    dump_config(cfg, out / "config.json")
    scenes = load_scenes(data)
    train, val = split_scenes(scenes, cfg.train.val_scenes)
    vae = stats = None
    if not raw:
        if vae_ckpt is None:
            raise ValidationError("latent-mode denoiser training needs --vae")
        vae, stats, _, _ = load_vae(vae_ckpt)
    probe = train[: cfg.train.probe_scenes] if cfg.train.probe_scenes else None
    _, loss = train_denoiser(cfg, train, out, vae=vae, stats=stats, raw=raw, dtype=dtype, probe=probe,
                             val_scenes=val or None)
    print(f"denoiser: final loss {loss:.4g}")
    return out / "denoiser_best.zip"


def load_generator(denoiser_ckpt, vae_ckpt=None) -> TrajectoryGenerator:
    denoiser, stats, _, _ = load_denoiser(denoiser_ckpt)
    if denoiser.config.flow.mode == "raw":
        return TrajectoryGenerator(denoiser)
    if vae_ckpt is None:
        raise ValidationError("latent-mode sampling needs a VAE checkpoint")
    vae, vae_stats, _, _ = load_vae(vae_ckpt)
    return TrajectoryGenerator(denoiser, vae.to(next(denoiser.parameters()).dtype), stats or vae_stats)


def cmd_sample(denoiser_ckpt, vae_ckpt, scene_dir, K: int, steps: int | None, seed: int, out,
               overlays: bool = True):
    if K < 1:
        raise ValidationError("K must be at least 1")
    out = _prepare_out(out)
    rec = read_scene(scene_dir)
    gen = load_generator(denoiser_ckpt, vae_ckpt)
    samples = gen.generate(rec.image, K, seeded_generator(seed), steps)
    for k, s in enumerate(samples):
        write_grid(s, out / f"sample_{k}.bin")
        if overlays:
            write_overlay(out / f"overlay_{k}.ppm", rec.image, s)
    print(f"wrote {K} samples for {rec.scene_id} to {out}")
    return samples


def cmd_evaluate(cfg: RunConfig, data, out, denoiser_ckpt=None, vae_ckpt=None, K: int | None = None,
                 gt_bypass: bool = False):
    """Sample K futures per scene and score them; also records the static-predictor floor."""
    out = _prepare_out(out)
    dump_config(cfg, out / "config.json")
    K = K or cfg.eval.K
    ds = Dataset(data)
    n = len(ds) if cfg.eval.n_scenes <= 0 else min(cfg.eval.n_scenes, len(ds))
    gen = None if gt_bypass else load_generator(denoiser_ckpt, vae_ckpt)
    per_scene, all_gen, all_sim, static_scores, recon = [], [], [], [], []
    for i in range(n):
        rec = ds[i]
        sims = rec.futures[:K]
        if gt_bypass:
            samples = [f.astype(np.float64) for f in sims]
        else:
            samples = list(gen.generate(rec.image, K, seeded_generator(splitmix64(cfg.seed, i)), cfg.sample.steps))
            if gen.vae is not None:
                dtype = next(gen.vae.parameters()).dtype
                x = torch.as_tensor(np.stack(sims), dtype=dtype)
                im = torch.as_tensor(rec.image, dtype=dtype)[None].expand(len(sims), -1, -1, -1)
                recon.append(reconstruction_errors(gen.vae, x, im))
        per_scene.append(score_scene(rec.scene_id, samples, sims, rec.masks, pairing=cfg.eval.pairing))
        static = static_grid(rec.T, *rec.masks.shape, rec.stride)
        static_scores.append(best_of_k([static], sims, cfg.eval.pairing))
        all_gen.extend(samples)
        all_sim.extend(sims)
    report = build_report(per_scene, all_gen, all_sim)
    report.check_finite()
    extra = {"K": K, "n_scenes": n, "static_best_of_k": float(np.mean(static_scores)), "gt_bypass": gt_bypass,
             "pairing": cfg.eval.pairing}
    if recon:
        extra["vae_recon_px"] = float(np.mean([r[0] for r in recon]))
        extra["vae_recon_mse"] = float(np.mean([r[1] for r in recon]))
    (out / "report.json").write_text(report.to_json(**extra))
    write_scene_csv(per_scene, out / "scenes.csv")
    print(report.to_json(**extra), end="")
    return report, extra


def shuffle_velocities(grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute each track's frame-to-frame velocities in time and re-integrate from its anchor."""
    g = np.asarray(grid, dtype=np.float64)
    T, Gh, Gw, _ = g.shape
    vel = np.diff(g, axis=0).reshape(T - 1, Gh * Gw, 2)
    perm = np.argsort(rng.random((T - 1, Gh * Gw)), axis=0)
    shuffled = np.take_along_axis(vel, perm[..., None], axis=0).reshape(T - 1, Gh, Gw, 2)
    return np.concatenate([g[:1], g[:1] + np.cumsum(shuffled, axis=0)], axis=0)


def metric_sanity(scenes: list[SceneRecord], seed: int = 0, cfg: FeatureConfig = FeatureConfig(),
                  pairing: str = "coverage") -> dict:
    """Half-split ground truth vs ground truth, and velocity-shuffled half vs ground truth."""
    K = scenes[0].K
    if K < 2 or K % 2:
        raise ValidationError(f"need an even K >= 2 futures per scene, got {K}")
    h = K // 2
    A = [rec.futures[:h] for rec in scenes]
    B = [rec.futures[h:] for rec in scenes]
    rng = np.random.default_rng(seed)
    P = [[shuffle_velocities(f, rng) for f in a] for a in A]
    return {
        "K": K,
        "half": h,
        "n_scenes": len(scenes),
        "gt_vs_gt": {"fvmd_scene": fvmd_scene(A, B, cfg),
                     "best_of_k": float(np.mean([best_of_k(a, b, pairing) for a, b in zip(A, B)]))},
        "shuffled_vs_gt": {"fvmd_scene": fvmd_scene(P, B, cfg),
                           "best_of_k": float(np.mean([best_of_k(p, b, pairing) for p, b in zip(P, B)]))},
        "self_best_of_k": float(np.mean([best_of_k(a, a, pairing) for a in A])),
        "note": f"distributional metrics depend on the number of samples; {h} per side here",
    }


def cmd_metric_sanity(cfg: RunConfig, data, out):
    out = _prepare_out(out)
    res = metric_sanity(load_scenes(data), cfg.seed, pairing=cfg.eval.pairing)
    res["ordering_ok"] = all(res["gt_vs_gt"][m] < res["shuffled_vs_gt"][m] for m in ("fvmd_scene", "best_of_k"))
    (out / "metric_sanity.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(json.dumps(res, indent=2, sort_keys=True))
    return res


def _read_probe_curve(path) -> list[dict]:
    with open(path) as fh:
        return [r for r in csv.DictReader(fh) if r["kappa"] != ""]


def cmd_ablate_raw(cfg: RunConfig, data, out, vae_ckpt=None, dtype=torch.float32):
    """Train latent and raw-coordinate denoisers under the same budget and compare probe curves."""
    out = _prepare_out(out)
    dump_config(cfg, out / "config.json")
    scenes = load_scenes(data)
    train, _ = split_scenes(scenes, cfg.train.val_scenes)
    if vae_ckpt is None:
        train_vae(cfg, train, out / "vae", dtype=dtype)
        vae_ckpt = out / "vae" / "vae_best.zip"
    vae, stats, _, _ = load_vae(vae_ckpt)
    probe = train[: max(cfg.train.probe_scenes, 1)]
    train_denoiser(cfg, train, out, vae=vae, stats=stats, dtype=dtype, probe=probe, prefix="latent")
    train_denoiser(cfg, train, out, raw=True, dtype=dtype, probe=probe, prefix="raw")
    lat = _read_probe_curve(out / "latent_curve.csv")
    raw = _read_probe_curve(out / "raw_curve.csv")
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "kappa_latent", "kappa_raw", "lrtl_latent", "lrtl_raw"])
        for a, b in zip(lat, raw):
            w.writerow([a["epoch"], a["kappa"], b["kappa"], a["lrtl"], b["lrtl"]])
    summary = {"epochs": len(lat), "final_kappa_latent": float(lat[-1]["kappa"]),
               "final_kappa_raw": float(raw[-1]["kappa"]), "final_lrtl_latent": float(lat[-1]["lrtl"]),
               "final_lrtl_raw": float(raw[-1]["lrtl"])}
    summary["expected_direction"] = summary["final_kappa_latent"] > summary["final_kappa_raw"]
    if not summary["expected_direction"]:
        warnings.warn("raw-coordinate model kept at least as much sample variance as the latent model")
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


@torch.no_grad()
def cmd_interp(vae_ckpt, scene_dir, i: int, j: int, n_steps: int, out, overlays: bool = True):
    """Decode straight-line interpolations between the posterior means of two futures."""
    if n_steps < 2:
        raise ValidationError("need at least 2 interpolation steps")
    out = _prepare_out(out)
    vae, _, _, _ = load_vae(vae_ckpt)
    vae.eval()
    rec = read_scene(scene_dir)
    dtype = next(vae.parameters()).dtype
    im = torch.as_tensor(rec.image, dtype=dtype)[None]
    f = vae.image_tokens(im)
    z_l = vae.encode(torch.as_tensor(rec.futures[i], dtype=dtype)[None], im, f).mean
    z_r = vae.encode(torch.as_tensor(rec.futures[j], dtype=dtype)[None], im, f).mean
    from .vae import latent_interpolate

    lams = [k / (n_steps - 1) for k in range(n_steps)]
    grids = []
    for k, lam in enumerate(lams):
        g = vae.decode(latent_interpolate(z_l, z_r, lam), im, f)[0].cpu().numpy()
        grids.append(g)
        write_grid(g, out / f"interp_{k}.bin")
        if overlays:
            write_overlay(out / f"interp_{k}.ppm", rec.image, g)
    from .metrics import mse

    summary = {"lambdas": lams, "endpoint_mse": [mse(grids[0], rec.futures[i]), mse(grids[-1], rec.futures[j])]}
    (out / "interp.json").write_text(json.dumps(summary, indent=2) + "\n")
    return grids, summary
