import csv
import json
import math
import time
import warnings

import numpy as np
import pytest
import torch

from conftest import tiny_run_config
from trajflow import cli, harness
from trajflow.config import dump_config, from_dict, load_config, to_dict, ConfigError
from trajflow.core import ValidationError, read_grid, read_scene, tree_digest
from trajflow.flow import DivergenceError, MissingStatsError
from trajflow.metrics import mse
from trajflow.train import NumericFailure, load_scenes, load_vae, train_denoiser, train_vae


def _bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config -----------------------------------------------------------------


def test_config_roundtrip(tmp_path, tiny_cfg):
    dump_config(tiny_cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == tiny_cfg
    assert to_dict(from_dict(to_dict(tiny_cfg))) == to_dict(tiny_cfg)


def test_config_defaults_follow_optimiser_table():
    cfg = load_config(None)
    assert (cfg.train.lr, cfg.train.clip_grad, cfg.sample.steps) == (6e-5, 1.0, 10)


@pytest.mark.parametrize("bad", [{"nope": 1}, {"train": {"lr": 1e-3, "momentum": 0.9}}, {"sim": {"K": 0}},
                                 {"vae": []}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


# -- CLI exit codes -------------------------------------------------------------


def test_cli_usage_errors(tmp_path, tiny_data):
    for argv in (["sample", "--denoiser", "d.zip", "--scene", str(tiny_data / "scene_00000"), "--K", "0"],
                 ["bogus"], [], ["generate", "--workers", "0"]):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == cli.EXIT_USAGE


def test_cli_validation_errors(tmp_path, tiny_data):
    bad = tmp_path / "bad.json"
    bad.write_text('{"sim": {"colour": 3}}')
    assert cli.main(["--config", str(bad), "generate", "--out", str(tmp_path / "g")]) == cli.EXIT_VALIDATION
    assert cli.main(["evaluate", "--data", str(tiny_data), "--out", str(tmp_path / "e")]) == cli.EXIT_VALIDATION
    assert cli.main(["train-denoiser", "--data", str(tiny_data), "--out", str(tmp_path / "d")]) == \
        cli.EXIT_VALIDATION
    assert cli.main(["evaluate", "--data", str(tmp_path / "missing"), "--gt-bypass",
                     "--out", str(tmp_path / "e2")]) == cli.EXIT_VALIDATION


def test_cli_numeric_failure(tmp_path, tiny_data, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError(3)

    monkeypatch.setattr(harness, "cmd_evaluate", boom)
    assert cli.main(["evaluate", "--data", str(tiny_data), "--gt-bypass", "--out", str(tmp_path)]) == \
        cli.EXIT_NUMERIC


def test_nan_loss_aborts(tmp_path, tiny_cfg, tiny_data, monkeypatch):
    import trajflow.train as train_mod

    def nan_loss(model, x, im, noise):
        z = torch.tensor(float("nan"), dtype=x.dtype, requires_grad=True)
        return z, z, z

    monkeypatch.setattr(train_mod, "beta_vae_loss", nan_loss)
    with pytest.raises(NumericFailure, match="step 0"):
        train_vae(tiny_cfg, load_scenes(tiny_data), tmp_path)
    cfg = tmp_path / "c.json"
    dump_config(tiny_cfg, cfg)
    assert cli.main(["--config", str(cfg), "train-vae", "--data", str(tiny_data), "--out", str(tmp_path / "v")]) \
        == cli.EXIT_NUMERIC


def test_cli_deterministic_restores_torch_state(tmp_path, tiny_data):
    prev = torch.get_default_dtype()
    assert cli.main(["--deterministic", "metric-sanity", "--data", str(tiny_data), "--out", str(tmp_path)]) == 0
    assert torch.get_default_dtype() == prev
    assert not torch.are_deterministic_algorithms_enabled()


# -- generate -----------------------------------------------------------------------


def test_generate_cli_deterministic_and_refuses(tmp_path, tiny_cfg):
    cfg = tmp_path / "c.json"
    dump_config(tiny_cfg, cfg)
    for name in ("a", "b"):
        assert cli.main(["--config", str(cfg), "--deterministic", "--seed", "5", "generate",
                         "--out", str(tmp_path / name)]) == 0
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")
    assert cli.main(["--config", str(cfg), "generate", "--out", str(tmp_path / "a")]) == cli.EXIT_VALIDATION
    assert cli.main(["--config", str(cfg), "--seed", "6", "generate", "--out", str(tmp_path / "c")]) == 0
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


# -- sample / evaluate --------------------------------------------------------------


def test_sample_deterministic_and_valid(tmp_path, tiny_data, tiny_ckpts):
    vae, den = tiny_ckpts
    scene = tiny_data / "scene_00001"
    for name in ("a", "b"):
        assert cli.main(["--deterministic", "--seed", "3", "sample", "--denoiser", str(den), "--vae", str(vae),
                         "--scene", str(scene), "--K", "3", "--out", str(tmp_path / name)]) == 0
    a = _bytes(tmp_path / "a")
    assert a == _bytes(tmp_path / "b")
    assert sorted(a) == sorted([f"sample_{k}.bin" for k in range(3)] + [f"overlay_{k}.ppm" for k in range(3)])
    rec = read_scene(scene)
    for k in range(3):
        g = read_grid(tmp_path / "a" / f"sample_{k}.bin")
        assert g.shape == rec.futures[0].shape and np.isfinite(g).all()


def test_sample_needs_vae_for_latent_model(tmp_path, tiny_data, tiny_ckpts):
    with pytest.raises(ValidationError):
        harness.cmd_sample(tiny_ckpts[1], None, tiny_data / "scene_00000", 2, None, 0, tmp_path)


def test_evaluate_deterministic(tmp_path, tiny_cfg, tiny_data, tiny_ckpts):
    vae, den = tiny_ckpts
    cfg = tmp_path / "c.json"
    dump_config(tiny_cfg, cfg)
    before = tree_digest(tiny_data)
    for name in ("a", "b"):
        assert cli.main(["--config", str(cfg), "--deterministic", "evaluate", "--data", str(tiny_data),
                         "--denoiser", str(den), "--vae", str(vae), "--out", str(tmp_path / name)]) == 0
    a, b = _bytes(tmp_path / "a"), _bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        if name == "config.json":
            # the echo records each run's own output directory
            ca, cb = json.loads(a[name]), json.loads(b[name])
            assert ca.pop("out") != cb.pop("out") and ca == cb
        else:
            assert a[name] == b[name], name
    assert tree_digest(tiny_data) == before
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    for key in ("fvmd", "fvmd_scene", "best_of_k", "lrtl", "kappa", "mse_meant", "mse_mean", "mse_min",
                "static_best_of_k", "vae_recon_px", "vae_recon_mse"):
        assert math.isfinite(report[key]), key
    assert report["static_best_of_k"] > 0
    with open(tmp_path / "a" / "scenes.csv") as fh:
        assert len(list(csv.DictReader(fh))) == tiny_cfg.sim.n_scenes


def test_evaluate_gt_bypass(tmp_path, tiny_cfg, tiny_data):
    report, extra = harness.cmd_evaluate(tiny_cfg, tiny_data, tmp_path, gt_bypass=True)
    assert report.best_of_k == 0.0
    assert report.fvmd_scene < 1e-8
    assert report.mse_min == 0.0
    assert extra["static_best_of_k"] > 0


def test_evaluate_config_echo_reproduces(tmp_path, tiny_cfg, tiny_data, tiny_ckpts):
    vae, den = tiny_ckpts
    harness.cmd_evaluate(tiny_cfg, tiny_data, tmp_path / "a", den, vae)
    echo = load_config(tmp_path / "a" / "config.json")
    assert echo == tiny_cfg
    harness.cmd_evaluate(echo, tiny_data, tmp_path / "b", den, vae)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


# -- training -------------------------------------------------------------------------


def test_denoiser_without_stats_refused(tmp_path, tiny_cfg, tiny_data):
    with pytest.raises(MissingStatsError):
        train_denoiser(tiny_cfg, load_scenes(tiny_data), tmp_path)


def test_training_writes_curves(tiny_ckpts):
    vae, den = tiny_ckpts
    with open(vae.parent / "vae_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(math.isfinite(float(r["loss"])) for r in rows if r["loss"])
    with open(den.parent / "denoiser_curve.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["kappa"]]
    assert len(rows) == 2 and all(float(r["kappa"]) >= 0 for r in rows)
    assert (vae.parent / "config.json").exists() and (den.parent / "config.json").exists()


def _vae_losses(cfg, scenes, out, resume=None):
    seen = {}
    train_vae(cfg, scenes, out, resume=resume, dtype=torch.float64, on_step=lambda s, m, loss: seen.update({s: loss}))
    return seen


def test_vae_resume_bitwise(tmp_path, tiny_data):
    scenes = load_scenes(tiny_data)
    one = tiny_run_config(train={"vae_epochs": 1})
    two = tiny_run_config(train={"vae_epochs": 2})
    first = _vae_losses(one, scenes, tmp_path / "first")
    n = max(first)
    straight = _vae_losses(two, scenes, tmp_path / "straight")
    resumed = _vae_losses(two, scenes, tmp_path / "resumed", resume=tmp_path / "first" / "vae_last.zip")
    assert min(resumed) == n + 1
    assert resumed[n + 1] == straight[n + 1]
    assert resumed == {k: v for k, v in straight.items() if k > n}


def test_denoiser_resume_bitwise(tmp_path, tiny_data, tiny_ckpts):
    scenes = load_scenes(tiny_data)
    vae, stats, _, _ = load_vae(tiny_ckpts[0])

    def losses(cfg, out, resume=None):
        train_denoiser(cfg, scenes, out, vae=vae, stats=stats, resume=resume, dtype=torch.float64)
        with open(out / "denoiser_curve.csv") as fh:
            return {int(r["step"]): r["loss"] for r in csv.DictReader(fh) if r["loss"]}

    first = losses(tiny_run_config(train={"denoiser_epochs": 1}), tmp_path / "first")
    two = tiny_run_config(train={"denoiser_epochs": 2})
    straight = losses(two, tmp_path / "straight")
    resumed = losses(two, tmp_path / "resumed", resume=tmp_path / "first" / "denoiser_last.zip")
    n = max(first)
    assert min(resumed) == n + 1
    assert resumed == {k: v for k, v in straight.items() if k > n}


def test_end_to_end_smoke_eight_scenes(tmp_path):
    cfg = tiny_run_config(sim={"n_scenes": 8})
    t0 = time.perf_counter()
    harness.cmd_generate(cfg, tmp_path / "data")
    vae = harness.cmd_train_vae(cfg, tmp_path / "data", tmp_path / "vae")
    den = harness.cmd_train_denoiser(cfg, tmp_path / "data", vae, tmp_path / "den")
    report, _ = harness.cmd_evaluate(cfg, tmp_path / "data", tmp_path / "eval", den, vae)
    report.check_finite()
    assert time.perf_counter() - t0 < 300


# -- protocols ------------------------------------------------------------------------


def test_metric_sanity_structure(tmp_path, tiny_cfg, tiny_data):
    res = harness.cmd_metric_sanity(tiny_cfg, tiny_data, tmp_path)
    assert res["K"] == 4 and res["half"] == 2 and "2 per side" in res["note"]
    assert res["self_best_of_k"] == 0.0
    assert res["gt_vs_gt"]["best_of_k"] > 0
    assert json.loads((tmp_path / "metric_sanity.json").read_text()) == res


def test_metric_sanity_needs_even_k(tiny_data):
    scenes = load_scenes(tiny_data)
    for rec in scenes:
        rec.futures = rec.futures[:3]
    with pytest.raises(ValidationError):
        harness.metric_sanity(scenes)


def test_shuffle_velocities_keeps_anchor_and_velocity_multiset():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(7, 3, 4, 2)).cumsum(axis=0)
    s = harness.shuffle_velocities(g, rng)
    assert np.array_equal(s[0], g[0])
    v, w = np.diff(g, axis=0), np.diff(s, axis=0)
    for i in range(3):
        for j in range(4):
            a = v[:, i, j][np.lexsort(v[:, i, j].T)]
            b = w[:, i, j][np.lexsort(w[:, i, j].T)]
            np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(s[-1], g[-1], atol=1e-12)


def test_interp_endpoints(tmp_path, tiny_cfg, tiny_data, tiny_ckpts):
    vae_path = tiny_ckpts[0]
    scene = tiny_data / "scene_00000"
    grids, summary = harness.cmd_interp(vae_path, scene, 0, 1, 2, tmp_path / "i")
    assert len(grids) == 2 and summary["lambdas"] == [0.0, 1.0]
    vae, _, _, _ = load_vae(vae_path)
    vae.eval()
    rec = read_scene(scene)
    im = torch.as_tensor(rec.image, dtype=torch.float64)[None]
    with torch.no_grad():
        for g, k in zip(grids, (0, 1)):
            x = torch.as_tensor(rec.futures[k], dtype=torch.float64)[None]
            direct = vae.decode(vae.encode(x, im).mean, im)[0].numpy()
            assert np.array_equal(g, direct)
            assert summary["endpoint_mse"][k] == mse(direct, rec.futures[k])
    with pytest.raises(ValidationError):
        harness.cmd_interp(vae_path, scene, 0, 1, 1, tmp_path / "j")


def test_interp_matches_evaluate_reconstruction(tmp_path, tiny_data, tiny_ckpts):
    vae, den = tiny_ckpts
    cfg = tiny_run_config(eval={"K": 2, "n_scenes": 1})
    _, extra = harness.cmd_evaluate(cfg, tiny_data, tmp_path / "e", den, vae)
    _, summary = harness.cmd_interp(vae, tiny_data / "scene_00000", 0, 1, 3, tmp_path / "i", overlays=False)
    assert math.isclose(np.mean(summary["endpoint_mse"]), extra["vae_recon_mse"], rel_tol=1e-10)


def test_ablate_raw_paired_curves(tmp_path, tiny_cfg, tiny_data, tiny_ckpts):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summary = harness.cmd_ablate_raw(tiny_cfg, tiny_data, tmp_path, vae_ckpt=tiny_ckpts[0])
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["epochs"] == tiny_cfg.train.denoiser_epochs
    for r in rows:
        assert float(r["kappa_latent"]) >= 0 and float(r["kappa_raw"]) >= 0
    assert isinstance(summary["expected_direction"], bool)
