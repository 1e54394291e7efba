"""Tile-based differentiable alpha-blending rasterizer.

Pixel centers sit at ``(x + 0.5, y + 0.5)``. Splats are depth sorted once per
frame, binned into 16x16 tiles, and composited front to back per pixel:

    C = sum_i c_i a_i(p) prod_{j<i} (1 - a_j(p)) + T_final * background

with ``a_i(p) = alpha_i * exp(-0.5 d^T cov2d_i^{-1} d)``. The backward pass replays
each pixel's traversal from the saved tile lists instead of storing every product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .exceptions import ContractError
from .geometry import Splat2D

TILE = 16
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DET_EPS = 1e-12


@dataclass(frozen=True)
class RasterSettings:
    """Compositing thresholds. ``exact()`` disables both for gradient checks and ground truth."""

    alpha_min: float = ALPHA_MIN
    t_min: float = T_MIN
    tile: int = TILE

    @classmethod
    def exact(cls) -> "RasterSettings":
        return cls(alpha_min=0.0, t_min=0.0)


@dataclass
class RenderContext:
    means: np.ndarray
    conics: np.ndarray
    cov2d: np.ndarray
    colors: np.ndarray
    alphas: np.ndarray
    valid: np.ndarray
    tile_ptr: np.ndarray
    tile_ids: np.ndarray
    n_done: np.ndarray
    background: np.ndarray
    settings: RasterSettings
    shape: tuple


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    context: RenderContext


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    color: np.ndarray
    alpha: np.ndarray


def depth_sort(depths):
    """Stable ascending order of camera-space depth."""
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


@numba.njit(cache=True)
def _bin_tiles(order, means, ext, valid, tiles_x, tiles_y, tile):
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    lo = np.zeros((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        if not valid[i]:
            lo[k, 0] = 1
            lo[k, 1] = 0
            continue
        # pixel centers of tile tx span [tx*tile + 0.5, tx*tile + tile - 0.5]
        fx0 = np.ceil((means[i, 0] - ext[i, 0] + 0.5 - tile) / tile)
        fx1 = np.floor((means[i, 0] + ext[i, 0] - 0.5) / tile)
        fy0 = np.ceil((means[i, 1] - ext[i, 1] + 0.5 - tile) / tile)
        fy1 = np.floor((means[i, 1] + ext[i, 1] - 0.5) / tile)
        x0 = int(max(fx0, 0.0))
        y0 = int(max(fy0, 0.0))
        x1 = int(min(fx1, tiles_x - 1.0))
        y1 = int(min(fy1, tiles_y - 1.0))
        lo[k, 0] = x0
        lo[k, 1] = x1
        lo[k, 2] = y0
        lo[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ptr = np.cumsum(counts)
    fill = ptr[:-1].copy()
    ids = np.empty(ptr[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        for ty in range(lo[k, 2], lo[k, 3] + 1):
            for tx in range(lo[k, 0], lo[k, 1] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return ptr, ids


@numba.njit(cache=True)
def _forward_kernel(means, conics, colors, alphas, ptr, ids, H, W, tiles_x, tile, bg, alpha_min, t_min):
    image = np.zeros((H, W, 3))
    final_t = np.ones((H, W))
    n_done = np.zeros((H, W), dtype=np.int64)
    for t in range(ptr.shape[0] - 1):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ptr[t]
        stop = ptr[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, H)):
            for px in range(tx * tile, min((tx + 1) * tile, W)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                done = start
                for k in range(start, stop):
                    i = ids[k]
                    dx = fx - means[i, 0]
                    dy = fy - means[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy)
                    a = alphas[i] * np.exp(power)
                    if a < alpha_min:
                        continue
                    test_t = T * (1.0 - a)
                    if test_t < t_min:
                        break
                    w = a * T
                    c0 += colors[i, 0] * w
                    c1 += colors[i, 1] * w
                    c2 += colors[i, 2] * w
                    T = test_t
                    done = k + 1
                image[py, px, 0] = c0 + T * bg[0]
                image[py, px, 1] = c1 + T * bg[1]
                image[py, px, 2] = c2 + T * bg[2]
                final_t[py, px] = T
                n_done[py, px] = done
    return image, final_t, n_done


@numba.njit(cache=True)
def _backward_kernel(means, conics, colors, alphas, ptr, ids, n_done, H, W, tiles_x, tile, bg, alpha_min, g_img):
    n = means.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_color = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    max_len = 0
    for t in range(ptr.shape[0] - 1):
        max_len = max(max_len, ptr[t + 1] - ptr[t])
    buf_i = np.empty(max_len, dtype=np.int64)
    buf_a = np.empty(max_len)
    buf_t = np.empty(max_len)
    buf_dx = np.empty(max_len)
    buf_dy = np.empty(max_len)
    buf_g = np.empty(max_len)
    for t in range(ptr.shape[0] - 1):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ptr[t]
        for py in range(ty * tile, min((ty + 1) * tile, H)):
            for px in range(tx * tile, min((tx + 1) * tile, W)):
                g0 = g_img[py, px, 0]
                g1 = g_img[py, px, 1]
                g2 = g_img[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                m = 0
                for k in range(start, n_done[py, px]):
                    i = ids[k]
                    dx = fx - means[i, 0]
                    dy = fy - means[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy)
                    gauss = np.exp(power)
                    a = alphas[i] * gauss
                    if a < alpha_min:
                        continue
                    buf_g[m] = gauss
                    buf_i[m] = i
                    buf_a[m] = a
                    buf_t[m] = T
                    buf_dx[m] = dx
                    buf_dy[m] = dy
                    m += 1
                    T = T * (1.0 - a)
                # colour seen behind the current splat, with unit transmittance
                b0 = bg[0]
                b1 = bg[1]
                b2 = bg[2]
                for r in range(m - 1, -1, -1):
                    i = buf_i[r]
                    a = buf_a[r]
                    Ti = buf_t[r]
                    w = a * Ti
                    g_color[i, 0] += w * g0
                    g_color[i, 1] += w * g1
                    g_color[i, 2] += w * g2
                    ga = Ti * ((colors[i, 0] - b0) * g0 + (colors[i, 1] - b1) * g1 + (colors[i, 2] - b2) * g2)
                    b0 = a * colors[i, 0] + (1.0 - a) * b0
                    b1 = a * colors[i, 1] + (1.0 - a) * b1
                    b2 = a * colors[i, 2] + (1.0 - a) * b2
                    g_alpha[i] += ga * buf_g[r]
                    gq = -0.5 * a * ga
                    dx = buf_dx[r]
                    dy = buf_dy[r]
                    g_conic[i, 0] += gq * dx * dx
                    g_conic[i, 1] += gq * dx * dy
                    g_conic[i, 2] += gq * dy * dy
                    g_mean[i, 0] += -gq * 2.0 * (conics[i, 0] * dx + conics[i, 1] * dy)
                    g_mean[i, 1] += -gq * 2.0 * (conics[i, 1] * dx + conics[i, 2] * dy)
    return g_mean, g_conic, g_color, g_alpha


def _extents(cov2d, alphas, valid, settings: RasterSettings):
    """Half-widths of the axis-aligned box outside which a splat is always skipped."""
    n = cov2d.shape[0]
    ext = np.zeros((n, 2))
    if settings.alpha_min > 0:
        ratio = np.where(valid, alphas, 0.0) / settings.alpha_min
        qmax = 2.0 * np.log(np.maximum(ratio, 1.0))
        ext[:, 0] = np.sqrt(qmax * np.maximum(cov2d[:, 0, 0], 0.0)) + 1e-6
        ext[:, 1] = np.sqrt(qmax * np.maximum(cov2d[:, 1, 1], 0.0)) + 1e-6
        valid = valid & (ratio > 1.0)
    else:
        ext[:] = np.inf
    return ext, valid


def render_forward(splats: Splat2D, colors, alphas, height, width, background=(0.0, 0.0, 0.0),
                   settings: RasterSettings | None = None) -> RenderOutput:
    """Composite projected splats into an ``height x width x 3`` image.

    ``colors`` are in [0, 1]; ``alphas`` are the effective per-splat opacities
    (already mask-modulated). Splats with a near-singular ``cov2d`` are skipped.
    """
    settings = settings or RasterSettings()
    H, W = int(height), int(width)
    means = np.ascontiguousarray(splats.mean2d, dtype=np.float64)
    cov = np.ascontiguousarray(splats.cov2d, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    n = means.shape[0]

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    valid = np.asarray(splats.visible, dtype=bool) & (det > DET_EPS)
    safe_det = np.where(valid, det, 1.0)
    conics = np.stack([cov[:, 1, 1] / safe_det, -cov[:, 0, 1] / safe_det, cov[:, 0, 0] / safe_det], axis=1)
    conics[~valid] = 0.0
    ext, valid = _extents(cov, alphas, valid, settings)

    tile = settings.tile
    tiles_x = -(-W // tile)
    tiles_y = -(-H // tile)
    order = depth_sort(splats.depth).astype(np.int64)
    ptr, ids = _bin_tiles(order, means, ext, valid, tiles_x, tiles_y, tile)
    if n == 0:
        means = np.zeros((0, 2))
        conics = np.zeros((0, 3))
        colors = np.zeros((0, 3))
    image, final_t, n_done = _forward_kernel(
        means, conics, colors, alphas, ptr, ids, H, W, tiles_x, tile, bg,
        float(settings.alpha_min), float(settings.t_min),
    )
    ctx = RenderContext(means, conics, cov, colors, alphas, valid, ptr, ids, n_done, bg, settings, (H, W))
    return RenderOutput(image=image, final_transmittance=final_t, context=ctx)


def render_backward(ctx: RenderContext, grad_image) -> SplatGrads:
    """Exact reverse-mode of :func:`render_forward` for a loss gradient on the image."""
    g = np.ascontiguousarray(grad_image, dtype=np.float64)
    H, W = ctx.shape
    if g.shape != (H, W, 3):
        raise ContractError(f"image gradient has shape {g.shape}, expected {(H, W, 3)}")
    tile = ctx.settings.tile
    tiles_x = -(-W // tile)
    g_mean, g_conic, g_color, g_alpha = _backward_kernel(
        ctx.means, ctx.conics, ctx.colors, ctx.alphas, ctx.tile_ptr, ctx.tile_ids, ctx.n_done,
        H, W, tiles_x, tile, ctx.background, float(ctx.settings.alpha_min), g,
    )
    # conic = cov^{-1}; dL/dcov = -Q G Q with G the full-matrix gradient on Q
    n = g_mean.shape[0]
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0] = ctx.conics[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = ctx.conics[:, 1]
    Q[:, 1, 1] = ctx.conics[:, 2]
    G = np.empty((n, 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    g_cov = -np.einsum("nij,njk,nkl->nil", Q, G, Q)
    g_cov[~ctx.valid] = 0.0
    g_mean[~ctx.valid] = 0.0
    g_color[~ctx.valid] = 0.0
    g_alpha[~ctx.valid] = 0.0
    return SplatGrads(mean2d=g_mean, cov2d=g_cov, color=g_color, alpha=g_alpha)
