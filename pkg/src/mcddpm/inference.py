"""Single-pass healthy reconstruction and residual anomaly maps.

Each slice is noised once to ``t_test`` and the network predicts the clean
slice directly; there is no iterative denoising chain.  The noise for slice
``k`` comes from a generator seeded with ``(seed, k)``, so a volume's
reconstruction does not depend on the order slices are processed in.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .model import MCDDPMNet
from .schedule import NoiseSchedule, check_timestep, q_sample_full

DEFAULT_T_TEST = 500


def slice_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _dtype(model: MCDDPMNet):
    return next(model.parameters()).dtype


@torch.no_grad()
def reconstruct_slice(
    x: np.ndarray,
    model: MCDDPMNet,
    schedule: NoiseSchedule,
    t_test: int = DEFAULT_T_TEST,
    rng: np.random.Generator | None = None,
    repeats: int = 1,
    independent_bridge_noise: bool = False,
) -> np.ndarray:
    """Predict the healthy version of one ``h x w`` slice.

    The bridge sees the same noised slice as the denoiser unless
    ``independent_bridge_noise`` asks for a separate draw.  With
    ``repeats > 1`` predictions from independent draws are averaged.
    """
    if not isinstance(model, MCDDPMNet):
        raise TypeError("model must be an MCDDPMNet")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an h x w slice, got shape {x.shape}")
    check_timestep(t_test, schedule.T)
    if rng is None:
        rng = np.random.default_rng()
    model.eval()
    dtype = _dtype(model)
    clean = torch.as_tensor(x, dtype=dtype)[None, None]
    out = np.zeros_like(x)
    for _ in range(repeats):
        x_t = q_sample_full(x, t_test, schedule, rng.standard_normal(x.shape))
        x_z = x_t
        if independent_bridge_noise and model.bridge is not None:
            x_z = q_sample_full(x, t_test, schedule, rng.standard_normal(x.shape))
        x_t = torch.as_tensor(x_t, dtype=dtype)[None, None]
        x_z = torch.as_tensor(x_z, dtype=dtype)[None, None]
        pred, _ = model(clean, x_t, x_z, t_test)
        out += pred[0, 0].double().numpy()
    return out / repeats


def reconstruct_volume(
    v: np.ndarray,
    model: MCDDPMNet,
    schedule: NoiseSchedule,
    t_test: int = DEFAULT_T_TEST,
    seed: int = 0,
    slice_indices: Sequence[int] | None = None,
    repeats: int = 1,
) -> np.ndarray:
    """Reconstruct every transverse slice of an ``(h, w, d)`` volume independently.

    ``slice_indices`` gives the global index of each slice of ``v`` (default
    ``0..d-1``) and selects its noise stream, so a sub-volume reproduces the
    matching slices of the full reconstruction.
    """
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {v.shape}")
    d = v.shape[2]
    indices = range(d) if slice_indices is None else list(slice_indices)
    if len(indices) != d:
        raise ValueError("need one slice index per slice")
    out = np.empty(v.shape, dtype=np.float64)
    for k, idx in enumerate(indices):
        out[:, :, k] = reconstruct_slice(
            v[:, :, k], model, schedule, t_test, slice_rng(seed, idx), repeats=repeats
        )
    return out


def residual_map(v: np.ndarray, v_hat: np.ndarray, p: int = 2) -> np.ndarray:
    """``|v - v_hat|`` for ``p = 1``, ``(v - v_hat) ** 2`` for ``p = 2``."""
    if np.shape(v) != np.shape(v_hat):
        raise ValueError(f"shape mismatch: {np.shape(v)} vs {np.shape(v_hat)}")
    diff = np.asarray(v, dtype=np.float64) - np.asarray(v_hat, dtype=np.float64)
    if p == 1:
        return np.abs(diff)
    if p == 2:
        return diff * diff
    raise ValueError(f"p must be 1 or 2, got {p!r}")
