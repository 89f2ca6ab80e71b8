"""Versioned checkpoint archive.

A checkpoint is an uncompressed zip holding ``archive.json`` (format version,
model kind, config echo, tensor index, latent stats, training step) and one
raw little-endian payload per tensor under ``tensors/``. Entry timestamps are
fixed so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import FormatError

ARCHIVE_FORMAT = "trajflow-checkpoint"
ARCHIVE_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    latent_stats: list | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(ckpt: Checkpoint, path) -> None:
    index = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(ckpt.tensors):
            arr = np.asarray(ckpt.tensors[name])
            code = {np.dtype("float32"): "<f4", np.dtype("float64"): "<f8", np.dtype("int64"): "<i8"}[arr.dtype]
            index.append({"name": name, "shape": list(arr.shape), "dtype": code})
            _entry(zf, f"tensors/{name}.bin", np.ascontiguousarray(arr, dtype=code).tobytes())
        meta = {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "kind": ckpt.kind, "step": ckpt.step,
                "config": ckpt.config, "latent_stats": ckpt.latent_stats, "tensors": index, "extra": ckpt.extra}
        _entry(zf, "archive.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path} is not a checkpoint archive") from exc
    with zf:
        meta = json.loads(zf.read("archive.json"))
        if meta.get("format") != ARCHIVE_FORMAT or meta.get("version") != ARCHIVE_VERSION:
            raise FormatError(f"unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        tensors = {}
        for t in meta["tensors"]:
            raw = zf.read(f"tensors/{t['name']}.bin")
            tensors[t["name"]] = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy()
    return Checkpoint(kind=meta["kind"], config=meta["config"], tensors=tensors,
                      latent_stats=meta["latent_stats"], step=meta["step"], extra=meta["extra"])


def model_tensors(model: torch.nn.Module, prefix: str = "model.") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str = "optim.") -> tuple[dict, dict]:
    """Flatten an optimiser state into tensors plus a JSON-able scalar part."""
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for pid, state in sd["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor) and val.dim() > 0:
                tensors[f"{prefix}{pid}.{key}"] = val.detach().cpu().numpy()
            else:
                scalars[f"{pid}.{key}"] = float(val)
    return tensors, {"scalars": scalars, "param_groups": sd["param_groups"]}


def restore_model(model: torch.nn.Module, tensors: dict, prefix: str = "model.") -> None:
    ref = model.state_dict()
    state = {}
    for k, v in ref.items():
        arr = tensors[prefix + k]
        state[k] = torch.as_tensor(arr, dtype=v.dtype)
    model.load_state_dict(state)


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict, meta: dict, prefix: str = "optim.") -> None:
    dtype = opt.param_groups[0]["params"][0].dtype
    state: dict = {}
    for key, val in meta["scalars"].items():
        pid, name = key.split(".", 1)
        state.setdefault(int(pid), {})[name] = torch.tensor(val, dtype=torch.float32)
    for key, arr in tensors.items():
        if key.startswith(prefix):
            pid, name = key[len(prefix):].split(".", 1)
            state.setdefault(int(pid), {})[name] = torch.as_tensor(arr, dtype=dtype)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
