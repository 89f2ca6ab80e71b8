"""Trajectory grids, coordinate conventions and the on-disk dataset format.

A trajectory grid is a float array of shape ``[T, Gh, Gw, 2]`` holding (x, y)
pixel coordinates. Pixel (0, 0) is the top-left image corner and the track of
cell (i, j) starts at the cell centre ``((j + 0.5) * s, (i + 0.5) * s)``.

Dataset layout::

    root/manifest.json
    root/<scene_id>/scene.json
    root/<scene_id>/image.ppm          binary P6, 8 bit
    root/<scene_id>/masks.bin          "MSKG" u32 version, u32 Gh, u32 Gw, u16[Gh*Gw]
    root/<scene_id>/future_<k>.bin     "TGRD" u32 version, u32 T, u32 Gh, u32 Gw, f32[T*Gh*Gw*2]

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = b"TGRD"
MASK_MAGIC = b"MSKG"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

_GRID_HEADER = struct.Struct("<4sIIII")
_MASK_HEADER = struct.Struct("<4sIII")


class DatasetError(Exception):
    """Base class for dataset format errors."""


class FormatError(DatasetError):
    """Bad magic bytes or unsupported version."""


class TruncationError(DatasetError):
    """Payload length disagrees with the header."""


class ShapeHeaderError(DatasetError):
    """Headers of files in one scene or dataset disagree with each other."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class EmptySelectionError(ValueError):
    pass


@dataclass
class SceneRecord:
    """One conditioning image together with K simulated futures.

    ``image`` is ``[H, W, 3]`` float in [0, 1], ``futures`` a list of
    ``[T, Gh, Gw, 2]`` float32 grids, ``masks`` ``[Gh, Gw]`` integer ids.
    """

    image: np.ndarray
    futures: list[np.ndarray]
    masks: np.ndarray
    seed: int
    scene_id: str
    stride: int = 2
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.futures)

    @property
    def T(self) -> int:
        return self.futures[0].shape[0]

    def validate(self) -> None:
        if not self.futures:
            raise ValidationError("scene has no futures")
        H, W = self.image.shape[:2]
        first = self.futures[0]
        for k, fut in enumerate(self.futures):
            if fut.shape != first.shape:
                raise ShapeHeaderError(f"future {k} has shape {fut.shape}, expected {first.shape}")
            if not np.array_equal(fut[0], first[0]):
                raise ValidationError(f"future {k} frame 0 differs from future 0")
        if self.masks.shape != first.shape[1:3]:
            raise ShapeHeaderError(f"mask shape {self.masks.shape} vs grid {first.shape[1:3]}")
        Gh, Gw = first.shape[1:3]
        if (Gh * self.stride, Gw * self.stride) != (H, W):
            raise ShapeHeaderError(f"grid {Gh}x{Gw} with stride {self.stride} does not tile {H}x{W}")


def grid_anchors(Gh: int, Gw: int, stride: float) -> np.ndarray:
    """Cell-centre anchor pixels, shape ``[Gh, Gw, 2]`` as (x, y)."""
    ys = (np.arange(Gh, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(Gw, dtype=np.float64) + 0.5) * stride
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def static_grid(T: int, Gh: int, Gw: int, stride: float, dtype=np.float32) -> np.ndarray:
    """A grid whose tracks never leave their anchors."""
    anchors = grid_anchors(Gh, Gw, stride).astype(dtype)
    return np.broadcast_to(anchors, (T, Gh, Gw, 2)).copy()


def anchor_error(grid: np.ndarray, stride: float) -> float:
    """Mean pixel distance between frame 0 and the grid anchors."""
    grid = np.asarray(grid, dtype=np.float64)
    anchors = grid_anchors(grid.shape[-3], grid.shape[-2], stride)
    return float(np.linalg.norm(grid[..., 0, :, :, :] - anchors, axis=-1).mean())


def check_grid(grid: np.ndarray, stride: float | None = None, atol: float = 1e-4) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ValidationError(f"trajectory grid must be [T, Gh, Gw, 2], got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValidationError("trajectory grid has non-finite coordinates")
    if stride is not None:
        anchors = grid_anchors(grid.shape[1], grid.shape[2], stride)
        if np.max(np.abs(grid[0] - anchors)) > atol:
            raise ValidationError("frame 0 does not match grid anchors")


def normalize_coords(grid, W: float, H: float) -> np.ndarray:
    """Map pixel coordinates to [-1, 1]: ``x' = 2x/W - 1``, ``y' = 2y/H - 1``."""
    if W <= 0 or H <= 0:
        raise ValidationError("image size must be positive")
    grid = np.asarray(grid)
    if not np.all(np.isfinite(grid)):
        raise ValidationError("non-finite coordinates")
    scale = np.array([2.0 / W, 2.0 / H])
    return (grid * scale - 1.0).astype(np.result_type(grid.dtype, np.float32))


def denormalize_coords(grid, W: float, H: float) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.shape[-1] != 2:
        raise ValidationError(f"last axis must hold (x, y), got {grid.shape}")
    scale = np.array([W / 2.0, H / 2.0])
    return ((grid + 1.0) * scale).astype(np.result_type(grid.dtype, np.float32))


def tracks_for_object(grid, masks, obj_id: int) -> np.ndarray:
    """Stack the tracks of one object into an ``[N, 2T]`` matrix.

    Row n is ``(x(0), y(0), ..., x(T-1), y(T-1))`` for the n-th matching cell in
    row-major grid order.
    """
    grid = np.asarray(grid)
    masks = np.asarray(masks)
    sel = masks == obj_id
    if obj_id < 1 or not sel.any():
        raise EmptySelectionError(f"object id {obj_id} not present in mask")
    T = grid.shape[0]
    # [T, N, 2] -> [N, T, 2] -> [N, 2T]
    return np.transpose(grid[:, sel], (1, 0, 2)).reshape(-1, 2 * T)


# -- binary files ---------------------------------------------------------


def encode_grid(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    check_grid(grid)
    T, Gh, Gw, _ = grid.shape
    header = _GRID_HEADER.pack(GRID_MAGIC, FORMAT_VERSION, T, Gh, Gw)
    return header + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    if len(buf) < _GRID_HEADER.size:
        raise TruncationError("grid file shorter than its header")
    magic, version, T, Gh, Gw = _GRID_HEADER.unpack_from(buf)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad grid magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    expected = T * Gh * Gw * 2 * 4
    payload = buf[_GRID_HEADER.size:]
    if len(payload) != expected:
        raise TruncationError(f"grid payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(T, Gh, Gw, 2).astype(np.float32)


def encode_masks(masks: np.ndarray) -> bytes:
    masks = np.asarray(masks)
    if masks.ndim != 2:
        raise ValidationError("mask grid must be 2D")
    if masks.min(initial=0) < 0 or masks.max(initial=0) > 0xFFFF:
        raise ValidationError("mask ids must fit in u16")
    Gh, Gw = masks.shape
    return _MASK_HEADER.pack(MASK_MAGIC, FORMAT_VERSION, Gh, Gw) + masks.astype("<u2").tobytes()


def decode_masks(buf: bytes) -> np.ndarray:
    if len(buf) < _MASK_HEADER.size:
        raise TruncationError("mask file shorter than its header")
    magic, version, Gh, Gw = _MASK_HEADER.unpack_from(buf)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad mask magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported mask version {version}")
    payload = buf[_MASK_HEADER.size:]
    if len(payload) != Gh * Gw * 2:
        raise TruncationError(f"mask payload has {len(payload)} bytes, header implies {Gh * Gw * 2}")
    return np.frombuffer(payload, dtype="<u2").reshape(Gh, Gw).astype(np.int64)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image must be [H, W, 3], got {image.shape}")
    H, W = image.shape[:2]
    pix = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode("ascii") + pix.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    # header: P6 <ws> W <ws> H <ws> maxval <single ws>
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncationError("ppm header is incomplete")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM: {tokens[0]!r}")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    payload = buf[pos + 1:]
    if len(payload) != H * W * 3:
        raise TruncationError(f"ppm payload has {len(payload)} bytes, expected {H * W * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(H, W, 3).astype(np.float32) / 255.0


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit levels the PPM file can store."""
    return (np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0).astype(np.float32)


def write_grid(grid: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path) -> np.ndarray:
    return decode_grid(Path(path).read_bytes())


def write_scene(record: SceneRecord, directory) -> Path:
    record.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "image.ppm").write_bytes(encode_ppm(record.image))
    (d / "masks.bin").write_bytes(encode_masks(record.masks))
    for k, fut in enumerate(record.futures):
        write_grid(fut, d / f"future_{k}.bin")
    meta = {"scene_id": record.scene_id, "seed": int(record.seed), "K": record.K,
            "stride": record.stride, **record.meta}
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_scene(directory) -> SceneRecord:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    image = decode_ppm((d / "image.ppm").read_bytes())
    masks = decode_masks((d / "masks.bin").read_bytes())
    K = int(meta.pop("K"))
    futures = [read_grid(d / f"future_{k}.bin") for k in range(K)]
    for k, fut in enumerate(futures[1:], start=1):
        if fut.shape != futures[0].shape:
            raise ShapeHeaderError(f"{d}: future_{k} header {fut.shape} vs {futures[0].shape}")
    if masks.shape != futures[0].shape[1:3]:
        raise ShapeHeaderError(f"{d}: masks header {masks.shape} vs grid {futures[0].shape[1:3]}")
    record = SceneRecord(image=image, futures=futures, masks=masks, seed=int(meta.pop("seed")),
                         scene_id=str(meta.pop("scene_id")), stride=int(meta.pop("stride")), meta=meta)
    record.validate()
    return record


# -- manifest -------------------------------------------------------------


@dataclass
class DatasetManifest:
    scenes: list[str]
    T: int
    Gh: int
    Gw: int
    s: int
    H: int
    W: int
    K: int
    master_seed: int = 0
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {"version": self.version, "master_seed": self.master_seed, "T": self.T, "Gh": self.Gh,
               "Gw": self.Gw, "s": self.s, "H": self.H, "W": self.W, "K": self.K,
               "scenes": list(self.scenes)}
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {doc.get('version')}")
        keys = {"version", "master_seed", "T", "Gh", "Gw", "s", "H", "W", "K", "scenes"}
        if set(doc) != keys:
            raise FormatError(f"manifest keys {sorted(doc)} differ from {sorted(keys)}")
        if (doc["Gh"] * doc["s"], doc["Gw"] * doc["s"]) != (doc["H"], doc["W"]):
            raise ShapeHeaderError("manifest grid does not tile the image")
        return cls(**doc)


def write_manifest(manifest: DatasetManifest, root) -> None:
    Path(root, "manifest.json").write_text(manifest.to_json())


def read_manifest(root) -> DatasetManifest:
    return DatasetManifest.from_json(Path(root, "manifest.json").read_text())


class Dataset:
    """Lazy read-only view over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)

    def __len__(self) -> int:
        return len(self.manifest.scenes)

    def __getitem__(self, i: int) -> SceneRecord:
        rec = read_scene(self.root / self.manifest.scenes[i])
        m = self.manifest
        if rec.futures[0].shape != (m.T, m.Gh, m.Gw, 2) or rec.K != m.K:
            raise ShapeHeaderError(f"scene {rec.scene_id} disagrees with manifest")
        return rec

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def tree_digest(root) -> str:
    """SHA-256 over relative paths and file bytes, for determinism checks."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath, name)
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
