"""Columnar store of canonical Gaussians with per-Gaussian temporal mask logits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .nets import sigmoid

# Declared column order; the checkpoint format writes columns in exactly this order.
COLUMNS = ("position", "rotation", "log_scale", "color", "opacity", "mask")
INIT_OPACITY = 0.1


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """N Gaussians stored column-major.

    ``color`` and ``opacity`` hold pre-sigmoid values; ``mask`` holds the N x K
    temporal logits. ``grads`` mirrors the parameter columns.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    mask: np.ndarray
    knn: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    seed: int = 0
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        self.zero_grad()

    @property
    def n(self) -> int:
        return self.position.shape[0]

    @property
    def K(self) -> int:
        return self.mask.shape[1]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in COLUMNS}

    def zero_grad(self):
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in COLUMNS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{name: getattr(self, name).copy() for name in COLUMNS},
                             knn=self.knn.copy(), seed=self.seed)

    def validate(self):
        for name in COLUMNS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"non-finite values in column {name!r}")


def _nn_distances(points, k, block=256):
    n = points.shape[0]
    d = np.empty((n, n))
    for s in range(0, n, block):
        diff = points[s:s + block, None, :] - points[None, :, :]
        d[s:s + block] = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return d, order


def init_cloud(points, colors, K, seed=0, n_scale_neighbors=3) -> GaussianCloud:
    """Canonical cloud from an aggregated point set.

    Each Gaussian gets identity rotation, an isotropic scale equal to the mean
    distance to its (up to three) nearest neighbours, opacity 0.1 and all-zero
    mask logits.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InvalidInputError("cannot initialise a cloud from an empty point list")
    if cols.shape != pts.shape:
        raise InvalidInputError("points and colors must have the same length")
    if int(K) < 2:
        raise InvalidInputError("need at least two timestamps (K >= 2)")
    n = pts.shape[0]
    if n > 1:
        k = min(n_scale_neighbors, n - 1)
        d, order = _nn_distances(pts, k)
        nn = np.take_along_axis(d, order, axis=1).mean(axis=1)
        nn = np.maximum(nn, 1e-7)
        log_scale = np.repeat(np.log(nn)[:, None], 3, axis=1)
    else:
        log_scale = np.zeros((1, 3))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        position=pts.copy(),
        rotation=rot,
        log_scale=log_scale,
        color=logit(np.clip(cols, 0.01, 0.99)),
        opacity=np.full(n, logit(INIT_OPACITY)),
        mask=np.zeros((n, int(K))),
        seed=int(seed),
    )


def softmax_rows(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mask_distribution(cloud: GaussianCloud) -> np.ndarray:
    """Row-wise softmax of the mask logits (N x K, rows sum to one)."""
    return softmax_rows(cloud.mask)


def softmax_rows_backward(probs, grad):
    return probs * (grad - np.sum(grad * probs, axis=1, keepdims=True))


def modulated_opacity(cloud: GaussianCloud, t: int) -> np.ndarray:
    """``sigmoid(mask[:, t]) * sigmoid(opacity)`` for timestamp index ``t``."""
    if not 0 <= int(t) < cloud.K:
        raise IndexError(f"timestamp index {t} outside [0, {cloud.K})")
    return sigmoid(cloud.mask[:, int(t)]) * sigmoid(cloud.opacity)


def build_knn(positions, k) -> np.ndarray:
    """Exhaustive k-nearest neighbours, self excluded, ties to the lower index.

    ``positions`` may be a :class:`GaussianCloud` (its canonical positions are used).
    """
    if isinstance(positions, GaussianCloud):
        positions = positions.position
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n <= k:
        raise InvalidInputError(f"need more than k={k} points for a neighbour table, got {n}")
    _, order = _nn_distances(pts, k)
    return order.astype(np.int64)
