"""Turn residual maps into binary segmentations.

Chain: median filter -> eroded brain mask -> fixed threshold.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

DEFAULT_KERNEL = 5
DEFAULT_EROSION = 3
DEFAULT_THETA = 0.2
THETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)


def median_filter_3d(m: np.ndarray, kernel: int = DEFAULT_KERNEL) -> np.ndarray:
    """Cubic median filter with zero padding at the borders."""
    if int(kernel) != kernel or kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd integer >= 1, got {kernel!r}")
    return ndimage.median_filter(np.asarray(m), size=int(kernel), mode="constant", cval=0.0)


def brain_mask(v: np.ndarray) -> np.ndarray:
    return (np.asarray(v) > 0).astype(np.uint8)


def erode(mask: np.ndarray, iterations: int = DEFAULT_EROSION) -> np.ndarray:
    """Binary erosion with the 6-connected cross; voxels outside the array count as 0."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if iterations == 0:
        return mask.astype(np.uint8)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    out = ndimage.binary_erosion(mask, structure=structure, iterations=iterations, border_value=0)
    return out.astype(np.uint8)


def threshold_binarize(m: np.ndarray, mask: np.ndarray, theta: float = DEFAULT_THETA) -> np.ndarray:
    if not theta > 0:
        raise ValueError("theta must be positive")
    return ((np.asarray(m) > theta) & (np.asarray(mask) > 0)).astype(np.uint8)


def postprocess(
    residual: np.ndarray,
    volume: np.ndarray,
    theta: float = DEFAULT_THETA,
    kernel: int = DEFAULT_KERNEL,
    iterations: int = DEFAULT_EROSION,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the full chain; returns ``(filtered_map, eroded_mask, segmentation)``."""
    filtered = median_filter_3d(residual, kernel)
    mask = erode(brain_mask(volume), iterations)
    return filtered, mask, threshold_binarize(filtered, mask, theta)
