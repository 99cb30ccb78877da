"""Volume records, array-level preprocessing, training-slice sampling and phantoms.

Volumes are ``(h, w, d)`` arrays; ``v[:, :, k]`` is transverse slice ``k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class ConstantVolumeWarning(UserWarning):
    """Raised when a volume has no intensity spread to normalize."""


@dataclass
class VolumeRecord:
    volume: np.ndarray = field(repr=False)
    subject_id: str
    split: str
    ground_truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.volume.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.volume.shape}")
        if self.ground_truth is not None:
            if self.ground_truth.shape != self.volume.shape:
                raise ValueError("ground truth shape does not match volume shape")
            if self.split == "train":
                raise ValueError("training volumes must not carry ground truth")


def normalize_percentile(v: np.ndarray, lo: float = 1.0, hi: float = 99.0) -> np.ndarray:
    """Map the lo/hi percentiles of the nonzero voxels to 0/1 and clip to [0, 1].

    A volume without spread (all zero or one constant value) comes back as
    zeros with a :class:`ConstantVolumeWarning`.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty volume")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo} and {hi}")
    nonzero = v[v != 0]
    if nonzero.size == 0:
        warnings.warn("volume has no nonzero voxels", ConstantVolumeWarning, stacklevel=2)
        return np.zeros_like(v)
    p_lo, p_hi = np.percentile(nonzero, [lo, hi])
    if p_hi <= p_lo:
        warnings.warn("volume intensities are constant", ConstantVolumeWarning, stacklevel=2)
        return np.zeros_like(v)
    return np.clip((v - p_lo) / (p_hi - p_lo), 0.0, 1.0)


def crop_to_foreground(v: np.ndarray) -> np.ndarray:
    nz = np.nonzero(v)
    if nz[0].size == 0:
        raise ValueError("volume is empty: no foreground bounding box")
    return v[tuple(slice(a.min(), a.max() + 1) for a in nz)]


def mean_pool(v: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block-average by ``factor`` per axis; trailing remainders are dropped."""
    shape = [s // factor for s in v.shape]
    if min(shape) == 0:
        raise ValueError(f"volume {v.shape} too small to pool by {factor}")
    v = v[tuple(slice(0, s * factor) for s in shape)]
    return v.reshape(shape[0], factor, shape[1], factor, shape[2], factor).mean(axis=(1, 3, 5))


def preprocess_volume(
    v: np.ndarray,
    factor: int = 2,
    trim: int = 15,
    lo: float = 1.0,
    hi: float = 99.0,
    crop: bool = True,
) -> np.ndarray:
    """Crop to foreground, mean-pool, trim transverse slices at both ends, normalize.

    Expects skull-stripped, atlas-registered input.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {v.shape}")
    if crop:
        v = crop_to_foreground(v)
    if factor > 1:
        v = mean_pool(v, factor)
    if v.shape[2] <= 2 * trim:
        raise ValueError(f"{v.shape[2]} slices cannot lose {trim} from each end")
    if trim:
        v = v[:, :, trim:-trim]
    return normalize_percentile(v, lo, hi)


def allowed_slices(volume: np.ndarray) -> np.ndarray:
    """Transverse slices with any foreground; every slice if the volume is empty."""
    idx = np.flatnonzero(np.any(volume != 0, axis=(0, 1)))
    return idx if idx.size else np.arange(volume.shape[2])


def sample_training_slices(
    records: Sequence[VolumeRecord],
    epoch_seed,
    batch_size: int = 8,
) -> Iterator[tuple[np.ndarray, list[tuple[str, int]]]]:
    """Yield shuffled batches holding one uniformly drawn slice per training volume.

    Each batch is ``(slices, keys)`` with ``slices`` of shape ``(B, h, w)`` and
    ``keys`` the ``(subject_id, slice_index)`` pairs.  Ground truth never leaves
    this function; records carrying it are rejected.
    """
    if not records:
        raise ValueError("no training volumes")
    for r in records:
        if r.split != "train" or r.ground_truth is not None:
            raise ValueError(f"record {r.subject_id!r} is not a healthy training volume")
    rng = np.random.default_rng(epoch_seed)
    picks = [(r, int(rng.choice(allowed_slices(r.volume)))) for r in records]
    order = rng.permutation(len(picks))
    for start in range(0, len(order), batch_size):
        chunk = [picks[i] for i in order[start : start + batch_size]]
        slices = np.stack([r.volume[:, :, k] for r, k in chunk]).astype(np.float32)
        yield slices, [(r.subject_id, k) for r, k in chunk]


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic brain-like volumes: nested ellipsoids with bright ventricles.

    Test volumes get hyperintense spheres whose voxels form the ground truth;
    anomaly placements are redrawn until the anomalous fraction of brain
    voxels falls inside ``prevalence_range``.
    """

    image_size: tuple[int, int] = (64, 64)
    depth: int = 24
    n_train: int = 24
    n_val: int = 4
    n_test: int = 8
    anomaly_count: int = 2
    radius_range: tuple[float, float] = (3.5, 6.5)
    offset_range: tuple[float, float] = (0.45, 0.6)
    prevalence_range: tuple[float, float] = (0.02, 0.05)
    noise_std: float = 0.02
    deformation: float = 0.08
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.anomaly_count < 0:
            raise ValueError("anomaly_count must be >= 0")
        if self.anomaly_count and 2 * self.radius_range[1] >= min(h, w, self.depth):
            raise ValueError("anomaly radius exceeds the image")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError("invalid radius range")


def _phantom_tissue(spec: PhantomSpec, rng: np.random.Generator):
    """Return ``(raw_volume, brain_radius, ventricle_mask)`` for one healthy subject."""
    h, w = spec.image_size
    d = spec.depth
    jit = spec.deformation
    y, x, z = np.meshgrid(
        np.linspace(-1, 1, h), np.linspace(-1, 1, w), np.linspace(-1, 1, d), indexing="ij"
    )
    cy, cx = rng.uniform(-0.5, 0.5, 2) * jit
    theta = rng.uniform(-1, 1) * 2 * jit
    yr = (y - cy) * math.cos(theta) - (x - cx) * math.sin(theta)
    xr = (y - cy) * math.sin(theta) + (x - cx) * math.cos(theta)
    a, b, c = np.array([0.8, 0.68, 0.92]) * rng.uniform(1 - jit, 1 + jit, 3)
    r = np.sqrt((yr / a) ** 2 + (xr / b) ** 2 + (z / c) ** 2)

    tissue = np.where(r > 0.78, 0.55, 0.35)
    vent = np.zeros_like(r, dtype=bool)
    vy = rng.uniform(-0.1, 0.0)
    vs = rng.uniform(0.9, 1.1)
    for side in (-1.0, 1.0):
        vr = ((yr - vy) / (0.22 * vs)) ** 2 + ((xr - side * 0.16) / (0.08 * vs)) ** 2 + (z / 0.55) ** 2
        vent |= vr < 1.0
    tissue = np.where(vent, 0.9, tissue)
    # low-frequency texture
    for _ in range(3):
        k = rng.uniform(1.0, 3.0, 3)
        phase = rng.uniform(0, 2 * math.pi)
        tissue = tissue + 0.02 * np.sin(k[0] * np.pi * y + k[1] * np.pi * x + k[2] * np.pi * z + phase)
    # dark partial-volume rim so the lowest percentile sits on the brain edge
    tissue = tissue * np.clip((1.0 - r) / 0.05, 0.15, 1.0)
    return tissue, r, vent


def _insert_anomalies(spec: PhantomSpec, r: np.ndarray, vent: np.ndarray, rng: np.random.Generator):
    """Pick sphere placements; return ``(ground_truth, offsets)``."""
    brain = r < 1.0
    n_brain = brain.sum()
    grid = np.indices(r.shape)
    # keep spheres in the interior and away from the ventricles
    candidates = np.argwhere((r < 0.6) & ~vent)
    lo, hi = spec.prevalence_range
    for _ in range(1000):
        gt = np.zeros(r.shape, dtype=bool)
        offsets = np.zeros(r.shape)
        for _ in range(spec.anomaly_count):
            center = candidates[rng.integers(len(candidates))]
            radius = rng.uniform(*spec.radius_range)
            dist2 = sum((g - cc) ** 2 for g, cc in zip(grid, center))
            sphere = (dist2 <= radius**2) & brain
            gt |= sphere
            offsets = np.where(sphere, rng.uniform(*spec.offset_range), offsets)
        if (gt & vent).any():
            continue
        if lo <= gt.sum() / n_brain <= hi:
            return gt, offsets
    raise ValueError("could not place anomalies within the prevalence range; check the PhantomSpec settings")


def phantom_volume(spec: PhantomSpec, rng: np.random.Generator, anomalous: bool):
    """One raw (unnormalized) phantom and its anomaly mask.

    Returns ``(healthy, observed, ground_truth)``; ``observed`` equals
    ``healthy`` plus the anomaly offsets, so the two differ exactly on the
    ground-truth voxels.
    """
    tissue, r, vent = _phantom_tissue(spec, rng)
    brain = r < 1.0
    noise = rng.normal(0.0, spec.noise_std, r.shape)
    healthy = np.where(brain, np.maximum(tissue + noise, 0.01), 0.0)
    gt = np.zeros(r.shape, dtype=bool)
    observed = healthy
    if anomalous and spec.anomaly_count:
        gt, offsets = _insert_anomalies(spec, r, vent, rng)
        observed = healthy + offsets
    return healthy, observed, gt


def generate_phantom_dataset(spec: PhantomSpec = PhantomSpec()) -> list[VolumeRecord]:
    """Normalized train/val (healthy) and test (anomalous, with ground truth) records."""
    rng = np.random.default_rng(spec.seed)
    records = []
    plan = [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)]
    for split, n in plan:
        for i in range(n):
            _, observed, gt = phantom_volume(spec, rng, anomalous=split == "test")
            volume = normalize_percentile(observed).astype(np.float32)
            truth = None
            if split == "test":
                truth = (gt & (volume > 0)).astype(np.uint8)
            records.append(VolumeRecord(volume, f"{split}_{i:03d}", split, truth))
    return records


def split_records(records: Sequence[VolumeRecord], split: str) -> list[VolumeRecord]:
    return [r for r in records if r.split == split]
