"""On-disk formats.

Volumes are raw little-endian payloads (``float32`` maps, ``uint8`` binary
maps) in C order next to a ``key: value`` text header.  Checkpoints are a
single file: magic bytes, a length-prefixed JSON header describing every
named array, then the concatenated ``<f4`` payloads.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import VolumeRecord

CHECKPOINT_MAGIC = b"MCDDPMCK"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": "<f4", "uint8": "u1"}


class InvalidCheckpointError(ValueError):
    pass


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".hdr")


def save_volume(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write ``array`` as ``<path>.raw`` plus a ``.hdr`` sidecar; binary maps go out as uint8."""
    path = Path(path).with_suffix(".raw")
    array = np.asarray(array)
    dtype = "uint8" if array.dtype in (np.uint8, np.bool_) else "float32"
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.tobytes())
    header = {
        "dims": " ".join(str(s) for s in array.shape),
        "dtype": dtype,
        "endian": "little",
        "order": "C",
        "spacing": " ".join(repr(float(s)) for s in spacing),
    }
    _sidecar(path).write_text("".join(f"{k}: {v}\n" for k, v in header.items()))
    return path


def read_header(path) -> dict:
    header = {}
    for line in _sidecar(Path(path)).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
    return header


def load_volume(path) -> np.ndarray:
    path = Path(path).with_suffix(".raw")
    header = read_header(path)
    if header.get("endian", "little") != "little" or header.get("order", "C") != "C":
        raise ValueError(f"{path}: unsupported layout {header}")
    dims = tuple(int(s) for s in header["dims"].split())
    dtype = _DTYPES[header["dtype"]]
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return data.reshape(dims).copy()


# -- manifests ---------------------------------------------------------------

MANIFEST_COLUMNS = ("subject_id", "volume", "split", "ground_truth")


def write_manifest(path, records, root=None) -> Path:
    """Save records as volumes under ``root`` and a tab-separated manifest at ``path``."""
    path = Path(path)
    root = path.parent if root is None else Path(root)
    rows = []
    for r in records:
        vol = save_volume(root / "volumes" / r.subject_id, r.volume)
        gt = ""
        if r.ground_truth is not None:
            gt = save_volume(root / "labels" / r.subject_id, r.ground_truth.astype(np.uint8))
            gt = str(gt.relative_to(path.parent))
        rows.append((r.subject_id, str(vol.relative_to(path.parent)), r.split, gt))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return path


def read_manifest(path, split: str | None = None) -> list[VolumeRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            if split is not None and row["split"] != split:
                continue
            volume = load_volume(path.parent / row["volume"])
            gt = None
            if row.get("ground_truth"):
                gt = load_volume(path.parent / row["ground_truth"])
            records.append(VolumeRecord(volume, row["subject_id"], row["split"], gt))
    return records


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to rebuild and resume a model."""

    params: dict[str, np.ndarray]
    model_config: dict
    train_config: dict
    schedule: dict
    epoch: int
    val_error: float | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @property
    def param_groups(self) -> set[str]:
        return {name.split(".")[0] for name in self.params}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    arrays = [("param/" + k, v) for k, v in ckpt.params.items()]
    arrays += [("optim/" + k, v) for k, v in ckpt.optimizer.items()]
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f4", "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "mcddpm-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "schedule": ckpt.schedule,
        "epoch": ckpt.epoch,
        "val_error": ckpt.val_error,
        "optimizer_meta": ckpt.optimizer_meta,
        "history": ckpt.history,
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InvalidCheckpointError(f"{path} is not a checkpoint file")
    start = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[start : start + 8])
    try:
        header = json.loads(data[start + 8 : start + 8 + n])
    except ValueError as exc:
        raise InvalidCheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise InvalidCheckpointError(f"{path}: unsupported version {header.get('version')}")
    base = start + 8 + n
    params, optim = {}, {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise InvalidCheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=lo).reshape(e["shape"]).copy()
        kind, _, name = e["name"].partition("/")
        (params if kind == "param" else optim)[name] = arr
    return Checkpoint(
        params=params,
        model_config=header["model_config"],
        train_config=header["train_config"],
        schedule=header["schedule"],
        epoch=header["epoch"],
        val_error=header["val_error"],
        optimizer=optim,
        optimizer_meta=header["optimizer_meta"],
        history=header["history"],
    )


def save_slice_pngs(prefix, *volumes: np.ndarray) -> list[Path]:
    """Write one PNG per foreground slice with the given volumes side by side.

    Each panel is scaled by its own maximum.
    """
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    first = np.asarray(volumes[0])
    written = []
    for k in np.flatnonzero(np.any(first != 0, axis=(0, 1))):
        panels = []
        for v in volumes:
            s = np.asarray(v, dtype=np.float64)[:, :, k]
            top = s.max()
            panels.append(np.zeros_like(s) if top <= 0 else np.clip(s / top, 0, 1))
        img = (np.concatenate(panels, axis=1) * 255).round().astype(np.uint8)
        path = prefix.parent / f"{prefix.name}_slice{k:03d}.png"
        Image.fromarray(img).save(path)
        written.append(path)
    return written
