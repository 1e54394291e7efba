"""Small input checks shared by the estimator and the data entry points."""
from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError


def check_points(points, colors=None):
    """``(N, 3)`` finite float64 points (and matching colours in [0, 1])."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidInputError(f"points must be a non-empty (N, 3) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points contain non-finite values")
    if colors is None:
        return pts
    cols = np.asarray(colors, dtype=np.float64)
    if cols.shape != pts.shape:
        raise InvalidInputError(f"colors shape {cols.shape} does not match points {pts.shape}")
    if not np.all((cols >= 0) & (cols <= 1)):
        raise InvalidInputError("colors must lie in [0, 1]")
    return pts, cols


def check_image(image, height=None, width=None):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if height is not None and img.shape[:2] != (height, width):
        raise InvalidInputError(f"image is {img.shape[0]}x{img.shape[1]}, expected {height}x{width}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    return img


def check_timestamp(t, K):
    if isinstance(t, (bool, np.bool_)) or int(t) != t:
        raise InvalidInputError(f"timestamp index must be an integer, got {t!r}")
    t = int(t)
    if not 0 <= t < K:
        raise InvalidInputError(f"timestamp index {t} outside [0, {K})")
    return t
