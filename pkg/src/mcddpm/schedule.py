"""Linear variance schedule and the closed-form forward (noising) process.

Time indices are 1-based: ``t`` ranges over ``1..T`` and ``t = 0`` is the
clean image (``alpha_bar = 1``).  Noise is always supplied by the caller so
that results are reproducible; :func:`draw_noise` is the seeded convenience.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables of ``beta_t``, ``alpha_t`` and ``alpha_bar_t`` for ``t = 1..T``.

    Arrays are 0-indexed, so ``betas[t - 1]`` is the variance at step ``t``.
    """

    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    def alpha_bar(self, t: int) -> float:
        check_timestep(t, self.T, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_linear_schedule(
    T: int, beta_start: float = BETA_START, beta_end: float = BETA_END
) -> NoiseSchedule:
    """Endpoint-exact linear schedule ``beta_1 = beta_start``, ``beta_T = beta_end``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    steps = np.arange(T, dtype=np.float64) / (T - 1)
    betas = beta_start + steps * (beta_end - beta_start)
    # pin the endpoints against rounding in the interpolation
    betas[0], betas[-1] = beta_start, beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, beta_start, beta_end)


def check_timestep(t: int, T: int, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if int(t) != t or not lo <= t <= T:
        raise ValueError(f"time step must be an integer in [{lo}, {T}], got {t!r}")


def q_sample_full(
    x0: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray
) -> np.ndarray:
    """Noise every pixel: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match image shape {x0.shape}")
    check_timestep(t, schedule.T)
    abar = schedule.alpha_bars[t - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class PatchMask:
    """Binary ``h x w`` mask with a single ``patch_height x patch_width`` rectangle of ones."""

    mask: np.ndarray = field(repr=False)
    patch_height: int
    patch_width: int
    origin: tuple[int, int]

    @classmethod
    def from_origin(cls, h: int, w: int, patch_h: int, patch_w: int, origin: tuple[int, int]) -> "PatchMask":
        r, c = origin
        if not (0 <= r <= h - patch_h and 0 <= c <= w - patch_w):
            raise ValueError(f"patch at {origin} does not fit in a {h}x{w} slice")
        mask = np.zeros((h, w), dtype=np.float64)
        mask[r : r + patch_h, c : c + patch_w] = 1.0
        return cls(mask, patch_h, patch_w, (int(r), int(c)))


def sample_patch_mask(
    h: int,
    w: int,
    patch_h: int | Sequence[tuple[int, int]],
    patch_w: int | None = None,
    rng: np.random.Generator | None = None,
) -> PatchMask:
    """Place a patch uniformly over all valid positions.

    ``patch_h`` may instead be a list of ``(height, width)`` sizes, in which
    case one is chosen uniformly first.
    """
    if rng is None:
        rng = np.random.default_rng()
    if patch_w is None:
        sizes = list(patch_h)  # type: ignore[arg-type]
        if not sizes:
            raise ValueError("empty list of patch sizes")
        patch_h, patch_w = sizes[int(rng.integers(len(sizes)))]
    if not (0 < patch_h <= h and 0 < patch_w <= w):
        raise ValueError(f"patch {patch_h}x{patch_w} does not fit in a {h}x{w} slice")
    row = int(rng.integers(0, h - patch_h + 1))
    col = int(rng.integers(0, w - patch_w + 1))
    return PatchMask.from_origin(h, w, int(patch_h), int(patch_w), (row, col))


def q_sample_patched(
    x0: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    mask: PatchMask | np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    """Noise only inside the patch; pixels outside the mask are returned untouched."""
    x0 = np.asarray(x0)
    m = mask.mask if isinstance(mask, PatchMask) else np.asarray(mask)
    if m.shape != x0.shape[-m.ndim :]:
        raise ValueError(f"mask shape {m.shape} does not match image shape {x0.shape}")
    noisy = q_sample_full(x0, t, schedule, noise)
    return np.where(m > 0, noisy, x0)


def draw_noise(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(shape)


@dataclass
class CorruptedPair:
    x_full: np.ndarray
    x_patched: np.ndarray
    t: int
    noise: np.ndarray
    mask: PatchMask


def corrupt(
    x0: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    mask: PatchMask,
    rng: np.random.Generator,
) -> CorruptedPair:
    """Build the fully-noised and patch-noised views of one slice from a single draw."""
    noise = draw_noise(np.shape(x0), rng)
    return CorruptedPair(
        q_sample_full(x0, t, schedule, noise),
        q_sample_patched(x0, t, schedule, mask, noise),
        t,
        noise,
        mask,
    )
