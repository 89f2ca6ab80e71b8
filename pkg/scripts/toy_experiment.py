"""End-to-end toy run: simulate, train VAE and denoiser, score held-out scenes against the static floor.

    python scripts/toy_experiment.py --out runs/toy
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from trajflow.config import RunConfig, dump_config, from_dict
from trajflow.core import static_grid
from trajflow.flow import TrajectoryGenerator, seeded_generator
from trajflow.metrics import best_of_k, kappa
from trajflow.sim import generate_dataset, splitmix64
from trajflow.train import load_scenes, train_denoiser, train_vae

TOY = {
    "sim": {"stride": 4, "K": 8, "T": 24, "H": 64, "W": 64, "n_scenes": 200},
    "vae": {"size": "T", "patch": 2, "latent_channels": 8, "beta": 1e-3},
    "denoiser": {"size": "T", "patch": 1, "flow": {"t_loc": -1.5, "t_scale": 1.5}},
    "train": {"vae_epochs": 15, "denoiser_epochs": 100, "batch_size": 8, "lr": 1e-3, "warmup_steps": 100,
              "futures_per_scene": 1, "probe_scenes": 4, "probe_K": 8},
    "sample": {"K": 8, "steps": 10},
    "eval": {"K": 8},
    "seed": 0,
}


def toy_config(**overrides) -> RunConfig:
    doc = json.loads(json.dumps(TOY))
    for section, values in overrides.items():
        if isinstance(values, dict):
            doc.setdefault(section, {}).update(values)
        else:
            doc[section] = values
    return from_dict(doc)


def evaluate(gen: TrajectoryGenerator, scenes, K: int, steps: int, seed: int) -> dict:
    bok, static, kap = [], [], []
    for i, rec in enumerate(scenes):
        samples = list(gen.generate(rec.image, K, seeded_generator(splitmix64(seed, 5_000_000 + i)), steps))
        bok.append(best_of_k(samples, rec.futures[:K]))
        static.append(best_of_k([static_grid(rec.T, *rec.masks.shape, rec.stride)], rec.futures[:K]))
        kap.append(kappa(samples))
    return {"best_of_k": float(np.mean(bok)), "static_best_of_k": float(np.mean(static)),
            "kappa": float(np.mean(kap)), "kappa_min": float(np.min(kap)), "n_scenes": len(scenes)}


def run(out, cfg: RunConfig, n_eval: int = 16, log=print) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    t0 = time.time()
    world = cfg.world()
    if not (out / "train" / "manifest.json").exists():
        generate_dataset(world, cfg.sim.n_scenes, out / "train", master_seed=cfg.seed)
    if not (out / "heldout" / "manifest.json").exists():
        generate_dataset(world, n_eval, out / "heldout", master_seed=cfg.seed + 1)
    train = load_scenes(out / "train")
    heldout = load_scenes(out / "heldout")
    timings = {"data_s": time.time() - t0}

    t = time.time()
    vae, stats, vae_loss = train_vae(cfg, train, out / "vae")
    timings["vae_s"] = time.time() - t
    log(f"vae done in {timings['vae_s']:.0f}s, loss {vae_loss:.3g}")

    t = time.time()
    denoiser, den_loss = train_denoiser(cfg, train, out / "denoiser", vae=vae, stats=stats,
                                        probe=train[: cfg.train.probe_scenes])
    timings["denoiser_s"] = time.time() - t
    log(f"denoiser done in {timings['denoiser_s']:.0f}s, loss {den_loss:.3g}")

    gen = TrajectoryGenerator(denoiser, vae, stats)
    t = time.time()
    result = {"heldout": evaluate(gen, heldout, cfg.eval.K, cfg.sample.steps, cfg.seed),
              "train": evaluate(gen, train[:n_eval], cfg.eval.K, cfg.sample.steps, cfg.seed)}
    timings["eval_s"] = time.time() - t
    timings["total_s"] = time.time() - t0
    for split in ("heldout", "train"):
        r = result[split]
        r["improvement"] = 1.0 - r["best_of_k"] / r["static_best_of_k"]
    result["timings"] = timings
    (out / "toy_result.json").write_text(json.dumps(result, indent=2) + "\n")
    log(json.dumps(result, indent=2))
    return result


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/toy"))
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--vae-epochs", type=int)
    p.add_argument("--denoiser-epochs", type=int)
    args = p.parse_args()
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    train_over = {}
    if args.vae_epochs is not None:
        train_over["vae_epochs"] = args.vae_epochs
    if args.denoiser_epochs is not None:
        train_over["denoiser_epochs"] = args.denoiser_epochs
    run(args.out, toy_config(train=train_over), n_eval=args.n_eval)


if __name__ == "__main__":
    main()
