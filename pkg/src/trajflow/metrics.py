"""Evaluation metrics for sets of sampled trajectory grids.

All grids are ``[T, Gh, Gw, 2]`` arrays in pixels; computations run in float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import tracks_for_object


class MetricError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def mse(a, b) -> float:
    """Mean squared Euclidean point distance in px^2."""
    a, b = _f64(a), _f64(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(-1).mean())


def aggregate_mse(samples, gt, mode: str) -> float:
    """MSE of K samples against one ground truth.

    ``meant`` scores the sample-averaged trajectory, ``mean`` the average
    per-sample MSE and ``min`` the best sample.
    """
    if len(samples) == 0:
        raise MetricError("no samples")
    if mode == "meant":
        return mse(np.mean(np.stack([_f64(s) for s in samples]), axis=0), gt)
    errs = [mse(s, gt) for s in samples]
    if mode == "mean":
        return float(np.mean(errs))
    if mode == "min":
        return float(np.min(errs))
    raise MetricError(f"unknown aggregation mode {mode!r}")


def pairwise_mse(generated, simulated) -> np.ndarray:
    """``[n_gen, n_sim]`` matrix of MSE values."""
    g = np.stack([_f64(x) for x in generated]).reshape(len(generated), -1, 2)
    s = np.stack([_f64(x) for x in simulated]).reshape(len(simulated), -1, 2)
    if g.shape[1:] != s.shape[1:]:
        raise MetricError("generated and simulated grids differ in shape")
    return np.stack([((gi[None] - s) ** 2).sum(-1).mean(-1) for gi in g])


def best_of_k(generated, simulated, pairing: str = "coverage") -> float:
    """Best-of-K MSE for one image.

    ``coverage``: for every simulated future take the closest generated sample,
    then average. ``global``: the single smallest error over all pairs.
    """
    if len(generated) == 0 or len(simulated) == 0:
        raise MetricError("best_of_k needs non-empty sample lists")
    d = pairwise_mse(generated, simulated)
    if pairing == "coverage":
        return float(d.min(axis=0).mean())
    if pairing == "global":
        return float(d.min())
    raise MetricError(f"unknown pairing {pairing!r}")


def kappa(samples) -> float:
    """Scene sample variance: mean squared deviation from the per-point sample mean."""
    X = np.stack([_f64(s) for s in samples])
    mu = X.mean(axis=0, keepdims=True)
    return float(((X - mu) ** 2).mean())


def lrtl_matrix(M) -> float:
    """Frobenius residual of the rank-5 truncation, divided by sqrt(#entries)."""
    M = _f64(M)
    if M.shape[0] <= 5:
        return 0.0
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    # the residual equals the norm of the discarded singular values
    return float(math.sqrt(float((S[5:] ** 2).sum())) / math.sqrt(M.size))


def lrtl(grid, masks) -> float:
    """Low-rank trajectory loss averaged over the objects in ``masks``."""
    ids = [int(i) for i in np.unique(masks) if i >= 1]
    if not ids:
        raise MetricError("no foreground objects; LRTL is undefined")
    return float(np.mean([lrtl_matrix(tracks_for_object(grid, masks, i)) for i in ids]))


# -- motion features --------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    mag_bins: int = 8
    ori_bins: int = 8
    mag_min: float = 1e-2
    mag_max: float = 8.0
    window_t: int = 4
    window_hw: int = 8

    @property
    def hist_size(self) -> int:
        return self.mag_bins * self.ori_bins

    def n_windows(self, T: int, Gh: int, Gw: int) -> int:
        return ((T - 2) // self.window_t) * max(Gh // self.window_hw, 1) * max(Gw // self.window_hw, 1)

    def dim(self, T: int, Gh: int, Gw: int) -> int:
        return self.n_windows(T, Gh, Gw) * 2 * self.hist_size


def _quantize(vec: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Joint (magnitude, orientation) bin index of each 2-vector."""
    mag = np.linalg.norm(vec, axis=-1)
    # bin 0 is [0, mag_min); the remaining bins are log-spaced, the last one open-ended
    edges = np.geomspace(cfg.mag_min, cfg.mag_max, cfg.mag_bins)
    mbin = np.minimum(np.searchsorted(edges, mag, side="right"), cfg.mag_bins - 1)
    width = 2 * np.pi / cfg.ori_bins
    ang = np.arctan2(vec[..., 1], vec[..., 0])
    obin = np.floor((ang + width / 2) / width).astype(np.int64) % cfg.ori_bins
    obin = np.where(mbin == 0, 0, obin)
    return mbin * cfg.ori_bins + obin


def motion_features(grid, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Windowed, L1-normalised velocity and acceleration histograms of one video."""
    x = _f64(grid)
    T, Gh, Gw, _ = x.shape
    if T < 3:
        raise MetricError("motion features need at least 3 frames")
    vel = np.diff(x, axis=0)
    acc = np.diff(vel, axis=0)
    nt = (T - 2) // cfg.window_t
    wh = min(cfg.window_hw, Gh)
    ww = min(cfg.window_hw, Gw)
    nh, nw = Gh // wh, Gw // ww
    feats = []
    for series in (vel, acc):
        idx = _quantize(series[: nt * cfg.window_t, : nh * wh, : nw * ww], cfg)
        # [nt, wt, nh, wh, nw, ww] -> windows x members
        idx = idx.reshape(nt, cfg.window_t, nh, wh, nw, ww).transpose(0, 2, 4, 1, 3, 5)
        idx = idx.reshape(nt * nh * nw, -1)
        win = np.arange(idx.shape[0])[:, None]
        hist = np.zeros((idx.shape[0], cfg.hist_size))
        np.add.at(hist, (np.broadcast_to(win, idx.shape), idx), 1.0)
        feats.append(hist / hist.sum(axis=1, keepdims=True))
    # interleave per window: [velocity hist, acceleration hist]
    return np.concatenate([feats[0], feats[1]], axis=1).reshape(-1)


# -- Frechet distance -------------------------------------------------------


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features, ridge: float = 1e-6) -> GaussianSummary:
    F = _f64(features)
    if F.shape[0] < 2:
        raise MetricError("need at least 2 samples to fit a covariance")
    return GaussianSummary(F.mean(axis=0), np.cov(F, rowvar=False) + ridge * np.eye(F.shape[1]))


def _psd_sqrt(S: np.ndarray, tol: float) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    if w.min() < -tol:
        raise NumericalError(f"covariance has eigenvalue {w.min():.3g} below -{tol}")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def frechet_gaussian(g1: GaussianSummary, g2: GaussianSummary, tol: float = 1e-8) -> float:
    """Squared Frechet distance between two Gaussians.

    The cross term uses the eigenvalues of the symmetric matrix
    ``S1^(1/2) S2 S1^(1/2)``, which share their square roots' trace with
    ``(S1 S2)^(1/2)``.
    """
    m1, m2 = _f64(g1.mean), _f64(g2.mean)
    S1, S2 = _f64(g1.cov), _f64(g2.cov)
    if m1.shape != m2.shape or S1.shape != S2.shape or S1.shape != (m1.size, m1.size):
        raise MetricError("Gaussian summaries have mismatched dimensions")
    for S in (S1, S2):
        if not np.allclose(S, S.T, rtol=0, atol=1e-10 * max(1.0, np.abs(S).max())):
            raise MetricError("covariance is not symmetric")
    root1 = _psd_sqrt(S1, tol)
    M = root1 @ S2 @ root1
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w.min() < -tol:
        raise NumericalError(f"cross term has eigenvalue {w.min():.3g} below -{tol}")
    cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = m1 - m2
    return float(diff @ diff + np.trace(S1) + np.trace(S2) - 2 * cross)


def frechet_from_samples(F1, F2, ridge: float = 1e-6, tol: float = 1e-8) -> float:
    """Frechet distance of ridge-regularised Gaussian fits, without forming d x d matrices.

    With ``S_i = A_i A_i^T + ridge * I`` both covariances act as ``ridge * I``
    outside the span of the centred samples, so the spectrum of ``S1 S2`` is
    computed on that span and padded with ``ridge^2``. Exact for any ``d``.
    """
    F1, F2 = _f64(F1), _f64(F2)
    if F1.shape[1] != F2.shape[1]:
        raise MetricError("feature dimensions differ")
    if F1.shape[0] < 2 or F2.shape[0] < 2:
        raise MetricError("need at least 2 samples per side")
    d = F1.shape[1]
    A1 = (F1 - F1.mean(0)).T / math.sqrt(F1.shape[0] - 1)
    A2 = (F2 - F2.mean(0)).T / math.sqrt(F2.shape[0] - 1)
    # orthonormal basis of the joint sample span; centred samples are always
    # rank deficient, so this needs a rank-revealing factorisation
    U, s, _ = np.linalg.svd(np.concatenate([A1, A2], axis=1), full_matrices=False)
    Q = U[:, s > 1e-12 * max(1.0, s.max(initial=0.0))]
    m = Q.shape[1]
    B1, B2 = Q.T @ A1, Q.T @ A2
    S1 = B1 @ B1.T + ridge * np.eye(m)
    S2 = B2 @ B2.T + ridge * np.eye(m)
    root1 = _psd_sqrt(S1, tol)
    M = root1 @ S2 @ root1
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w.min() < -tol:
        raise NumericalError(f"cross term has eigenvalue {w.min():.3g} below -{tol}")
    cross = np.sqrt(np.clip(w, 0, None)).sum() + (d - m) * ridge
    trace = (A1 ** 2).sum() + (A2 ** 2).sum() + 2 * d * ridge
    diff = F1.mean(0) - F2.mean(0)
    return float(max(diff @ diff + trace - 2 * cross, 0.0))


def fvmd(generated, reference, cfg: FeatureConfig = FeatureConfig(), ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of the two sets' motion features."""
    if len(generated) < 2 or len(reference) < 2:
        raise MetricError("fvmd needs at least 2 videos per side")
    F1 = np.stack([motion_features(g, cfg) for g in generated])
    F2 = np.stack([motion_features(g, cfg) for g in reference])
    return frechet_from_samples(F1, F2, ridge=ridge)


def fvmd_scene(generated_sets, simulated_sets, cfg: FeatureConfig = FeatureConfig(),
               ridge: float = 1e-6) -> float:
    """FVMD computed within each scene, averaged over scenes."""
    if len(generated_sets) != len(simulated_sets) or not generated_sets:
        raise MetricError("need matching, non-empty per-scene sets")
    return float(np.mean([fvmd(g, s, cfg, ridge) for g, s in zip(generated_sets, simulated_sets)]))


# -- reporting ---------------------------------------------------------------


@dataclass
class MetricReport:
    """Dataset-level scores. MSE-family, Best-of-K, LRTL and kappa are in px^2."""

    fvmd: float
    fvmd_scene: float
    best_of_k: float
    lrtl: float
    kappa: float
    mse_meant: float
    mse_mean: float
    mse_min: float

    def check_finite(self) -> None:
        bad = [f.name for f in fields(self) if not math.isfinite(getattr(self, f.name))]
        if bad:
            raise NumericalError(f"non-finite metrics: {bad}")

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True) + "\n"


@dataclass
class SceneScores:
    scene_id: str
    best_of_k: float
    fvmd_scene: float
    lrtl: float
    kappa: float
    mse_meant: float
    mse_mean: float
    mse_min: float


def score_scene(scene_id, generated, simulated, masks, cfg: FeatureConfig = FeatureConfig(),
                pairing: str = "coverage") -> SceneScores:
    """Per-scene scores. MSE aggregates are averaged over the simulated futures."""
    agg = {m: float(np.mean([aggregate_mse(generated, gt, m) for gt in simulated]))
           for m in ("meant", "mean", "min")}
    has_objects = bool((np.asarray(masks) >= 1).any())
    return SceneScores(
        scene_id=scene_id,
        best_of_k=best_of_k(generated, simulated, pairing),
        fvmd_scene=fvmd(generated, simulated, cfg) if len(generated) >= 2 and len(simulated) >= 2 else float("nan"),
        lrtl=float(np.mean([lrtl(g, masks) for g in generated])) if has_objects else 0.0,
        kappa=kappa(generated),
        mse_meant=agg["meant"], mse_mean=agg["mean"], mse_min=agg["min"],
    )


def build_report(per_scene: list[SceneScores], all_generated, all_simulated,
                 cfg: FeatureConfig = FeatureConfig()) -> MetricReport:
    def avg(name):
        return float(np.mean([getattr(s, name) for s in per_scene]))

    return MetricReport(
        fvmd=fvmd(all_generated, all_simulated, cfg),
        fvmd_scene=avg("fvmd_scene"), best_of_k=avg("best_of_k"), lrtl=avg("lrtl"),
        kappa=avg("kappa"), mse_meant=avg("mse_meant"), mse_mean=avg("mse_mean"), mse_min=avg("mse_min"),
    )


def write_scene_csv(per_scene: list[SceneScores], path) -> None:
    names = [f.name for f in fields(SceneScores)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for s in per_scene:
            w.writerow([getattr(s, n) if n == "scene_id" else repr(float(getattr(s, n))) for n in names])
