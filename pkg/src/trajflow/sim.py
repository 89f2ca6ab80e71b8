"""Deterministic 2D rigid-body simulator and scene/dataset factory.

Units are pixels and frames: positions in px, velocities in px/frame, gravity
in px/frame^2 pointing towards +y (down in image coordinates). Bodies are discs
or regular polygons; collisions use each body's bounding circle and are
resolved with frictionless impulses, so polygons keep their spin.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (DatasetManifest, SceneRecord, grid_anchors, quantize_image, write_manifest,
                   write_scene)

MASK64 = (1 << 64) - 1


class PlacementError(RuntimeError):
    pass


def splitmix64(seed: int, index: int) -> int:
    """The ``index``-th output of a SplitMix64 stream started at ``seed``."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass
class RigidBody:
    shape: str  # "disc" or "polygon"
    radius: float  # disc radius or polygon circumradius
    mass: float
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    angle: float = 0.0
    angular_velocity: float = 0.0
    restitution: float = 1.0
    color: tuple = (1.0, 0.0, 0.0)
    n_vertices: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.shape == "polygon" and self.n_vertices < 3:
            raise ValueError("polygon needs at least 3 vertices")
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    def vertices(self) -> np.ndarray:
        k = np.arange(self.n_vertices)
        a = self.angle + 2 * np.pi * k / self.n_vertices
        return self.position + self.radius * np.stack([np.cos(a), np.sin(a)], axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Point-in-shape test for an ``[..., 2]`` array of points."""
        d = np.asarray(points, dtype=np.float64) - self.position
        if self.shape == "disc":
            return (d ** 2).sum(-1) <= self.radius ** 2
        # regular polygon: inside iff on the inner side of every edge
        n = self.n_vertices
        apothem = self.radius * math.cos(math.pi / n)
        inside = np.ones(d.shape[:-1], dtype=bool)
        for k in range(n):
            mid = self.angle + 2 * np.pi * (k + 0.5) / n
            normal = np.array([math.cos(mid), math.sin(mid)])
            inside &= d @ normal <= apothem
        return inside

    def kinetic_energy(self) -> float:
        # uniform-density moment of inertia is irrelevant to collisions here, use disc value
        inertia = 0.5 * self.mass * self.radius ** 2
        return 0.5 * self.mass * float(self.velocity @ self.velocity) + 0.5 * inertia * self.angular_velocity ** 2


@dataclass
class WorldConfig:
    H: int = 64
    W: int = 64
    stride: int = 2
    T: int = 24
    K: int = 8
    gravity: float = 0.05
    dt: float = 1.0
    substeps: int = 4
    n_bodies: tuple = (1, 3)
    radius_range: tuple = (5.0, 9.0)
    polygon_prob: float = 0.5
    polygon_vertices: tuple = (3, 6)
    speed_range: tuple = (0.5, 2.5)
    launch_jitter: float = 0.6  # radians around the direction to the image centre
    angular_speed: float = 0.15
    restitution_range: tuple = (0.6, 0.95)
    walls: bool = True
    background: tuple = (0.5, 0.5, 0.5)
    max_attempts: int = 500

    def __post_init__(self):
        self.n_bodies = tuple(self.n_bodies)
        self.radius_range = tuple(self.radius_range)
        self.polygon_vertices = tuple(self.polygon_vertices)
        self.speed_range = tuple(self.speed_range)
        self.restitution_range = tuple(self.restitution_range)
        self.background = tuple(self.background)
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.H % self.stride or self.W % self.stride:
            raise ValueError("image size must be divisible by the grid stride")

    @property
    def Gh(self) -> int:
        return self.H // self.stride

    @property
    def Gw(self) -> int:
        return self.W // self.stride


@dataclass
class Scene:
    bodies: list[RigidBody]
    image: np.ndarray
    masks: np.ndarray
    seed: int


_PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.70, 0.25], [0.20, 0.35, 0.90], [0.95, 0.80, 0.15],
    [0.80, 0.30, 0.85], [0.15, 0.80, 0.85], [0.95, 0.55, 0.15], [0.10, 0.10, 0.10],
])


def compute_masks(bodies: list[RigidBody], config: WorldConfig) -> np.ndarray:
    anchors = grid_anchors(config.Gh, config.Gw, config.stride)
    ids = np.zeros((config.Gh, config.Gw), dtype=np.int64)
    for k, body in enumerate(bodies):
        ids[body.contains(anchors) & (ids == 0)] = k + 1
    return ids


def render(bodies: list[RigidBody], config: WorldConfig) -> np.ndarray:
    ys, xs = np.mgrid[0:config.H, 0:config.W] + 0.5
    centres = np.stack([xs, ys], axis=-1)
    image = np.empty((config.H, config.W, 3))
    image[:] = config.background
    for body in bodies:
        image[body.contains(centres)] = body.color
    return quantize_image(image)


def sample_scene(seed: int, config: WorldConfig, n_bodies: int | None = None) -> Scene:
    """Place non-overlapping bodies at rest; velocities are drawn per future."""
    rng = np.random.default_rng(seed)
    if n_bodies is None:
        n_bodies = int(rng.integers(config.n_bodies[0], config.n_bodies[1] + 1))
    bodies: list[RigidBody] = []
    colors = rng.permutation(len(_PALETTE))
    for k in range(n_bodies):
        r = float(rng.uniform(*config.radius_range))
        if rng.random() < config.polygon_prob:
            shape, nv = "polygon", int(rng.integers(config.polygon_vertices[0], config.polygon_vertices[1] + 1))
        else:
            shape, nv = "disc", 0
        e = float(rng.uniform(*config.restitution_range))
        angle = float(rng.uniform(0, 2 * np.pi))
        for _ in range(config.max_attempts):
            pos = rng.uniform([r, r], [config.W - r, config.H - r])
            if all(np.linalg.norm(pos - b.position) > r + b.radius for b in bodies):
                break
        else:
            raise PlacementError(f"could not place body {k} after {config.max_attempts} attempts (seed {seed})")
        bodies.append(RigidBody(shape=shape, radius=r, mass=r * r, position=pos, angle=angle,
                                restitution=e, color=tuple(_PALETTE[colors[k % len(_PALETTE)]]),
                                n_vertices=nv))
    return Scene(bodies=bodies, image=render(bodies, config), masks=compute_masks(bodies, config), seed=seed)


def launch(bodies: list[RigidBody], velocity_seed: int, config: WorldConfig) -> list[RigidBody]:
    """Copies of ``bodies`` with fresh initial velocities aimed roughly at the image centre."""
    rng = np.random.default_rng(velocity_seed)
    centre = np.array([config.W / 2.0, config.H / 2.0])
    out = []
    for body in bodies:
        b = copy.deepcopy(body)
        to_c = centre - b.position
        heading = math.atan2(to_c[1], to_c[0]) if np.linalg.norm(to_c) > 1e-9 else rng.uniform(0, 2 * np.pi)
        heading += rng.uniform(-config.launch_jitter, config.launch_jitter)
        speed = rng.uniform(*config.speed_range)
        b.velocity = speed * np.array([math.cos(heading), math.sin(heading)])
        b.angular_velocity = float(rng.uniform(-config.angular_speed, config.angular_speed)) if b.shape == "polygon" else 0.0
        out.append(b)
    return out


def _resolve_walls(b: RigidBody, config: WorldConfig) -> None:
    lo = np.array([b.radius, b.radius])
    hi = np.array([config.W - b.radius, config.H - b.radius])
    for ax in range(2):
        if b.position[ax] < lo[ax]:
            b.position[ax] = lo[ax]
            if b.velocity[ax] < 0:
                b.velocity[ax] = -b.restitution * b.velocity[ax]
        elif b.position[ax] > hi[ax]:
            b.position[ax] = hi[ax]
            if b.velocity[ax] > 0:
                b.velocity[ax] = -b.restitution * b.velocity[ax]


def _resolve_pair(a: RigidBody, b: RigidBody) -> None:
    delta = b.position - a.position
    dist = math.sqrt(float(delta @ delta))
    overlap = a.radius + b.radius - dist
    if overlap <= 0:
        return
    normal = delta / dist if dist > 1e-12 else np.array([1.0, 0.0])
    inv_a, inv_b = 1.0 / a.mass, 1.0 / b.mass
    approach = float((b.velocity - a.velocity) @ normal)
    if approach < 0:
        e = min(a.restitution, b.restitution)
        j = -(1.0 + e) * approach / (inv_a + inv_b)
        a.velocity = a.velocity - j * inv_a * normal
        b.velocity = b.velocity + j * inv_b * normal
    corr = overlap / (inv_a + inv_b)
    a.position = a.position - corr * inv_a * normal
    b.position = b.position + corr * inv_b * normal


def step(bodies: list[RigidBody], config: WorldConfig) -> list[RigidBody]:
    """Advance one frame in place: gravity kick, then substepped drift and collisions."""
    g = np.array([0.0, config.gravity])
    for b in bodies:
        b.velocity = b.velocity + g * config.dt
    h = config.dt / config.substeps
    for _ in range(config.substeps):
        for b in bodies:
            b.position = b.position + b.velocity * h
            b.angle += b.angular_velocity * h
        for i in range(len(bodies)):
            for j in range(i + 1, len(bodies)):
                _resolve_pair(bodies[i], bodies[j])
        if config.walls:
            for b in bodies:
                _resolve_walls(b, config)
    return bodies


def simulate(bodies: list[RigidBody], config: WorldConfig, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Poses over ``n_frames`` frames, frame 0 being the initial state.

    Returns positions ``[n_frames, n_bodies, 2]`` and angles ``[n_frames, n_bodies]``.
    """
    pos = np.zeros((n_frames, len(bodies), 2))
    ang = np.zeros((n_frames, len(bodies)))
    for t in range(n_frames):
        if t > 0:
            step(bodies, config)
        for k, b in enumerate(bodies):
            pos[t, k] = b.position
            ang[t, k] = b.angle
    return pos, ang


def rollout(scene: Scene, velocity_seed: int, config: WorldConfig) -> np.ndarray:
    """Simulate one future of ``scene`` and emit the ``[T, Gh, Gw, 2]`` track grid."""
    bodies = launch(scene.bodies, velocity_seed, config)
    pos, ang = simulate(bodies, config, config.T)
    anchors = grid_anchors(config.Gh, config.Gw, config.stride)
    grid = np.broadcast_to(anchors, (config.T, config.Gh, config.Gw, 2)).copy()
    for k in range(len(bodies)):
        sel = scene.masks == k + 1
        if not sel.any():
            continue
        p = anchors[sel]
        c, s = math.cos(ang[0, k]), math.sin(ang[0, k])
        local = (p - pos[0, k]) @ np.array([[c, -s], [s, c]])  # R(-theta0) applied to rows
        cos_t, sin_t = np.cos(ang[1:, k]), np.sin(ang[1:, k])
        x = pos[1:, k, None, 0] + cos_t[:, None] * local[None, :, 0] - sin_t[:, None] * local[None, :, 1]
        y = pos[1:, k, None, 1] + sin_t[:, None] * local[None, :, 0] + cos_t[:, None] * local[None, :, 1]
        grid[1:, sel] = np.stack([x, y], axis=-1)
    return grid.astype(np.float32)


def make_record(seed: int, config: WorldConfig, scene_id: str, K: int | None = None) -> SceneRecord:
    K = config.K if K is None else K
    scene = sample_scene(seed, config)
    futures = [rollout(scene, splitmix64(seed, k), config) for k in range(K)]
    return SceneRecord(image=scene.image, futures=futures, masks=scene.masks, seed=seed,
                       scene_id=scene_id, stride=config.stride,
                       meta={"n_objects": len(scene.bodies)})


def _write_one(args) -> None:
    i, seed, config, out_dir = args
    write_scene(make_record(seed, config, f"scene_{i:05d}"), Path(out_dir) / f"scene_{i:05d}")


def generate_dataset(config: WorldConfig, n_scenes: int, out_dir, master_seed: int = 0,
                     workers: int = 1) -> DatasetManifest:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"refusing to write into non-empty directory {out}")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, splitmix64(master_seed, i), config, str(out)) for i in range(n_scenes)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_write_one, jobs))
    else:
        for job in jobs:
            _write_one(job)
    manifest = DatasetManifest(scenes=[f"scene_{i:05d}" for i in range(n_scenes)], T=config.T,
                               Gh=config.Gh, Gw=config.Gw, s=config.stride, H=config.H, W=config.W,
                               K=config.K, master_seed=master_seed)
    write_manifest(manifest, out)
    return manifest
