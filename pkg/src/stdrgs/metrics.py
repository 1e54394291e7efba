"""Image losses and quality metrics (L1, SSIM / D-SSIM, PSNR) with exact gradients."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .exceptions import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def l1_loss(pred, gt):
    """Mean absolute error and its (sub)gradient; zero at exact ties."""
    pred, gt = _check_pair(pred, gt)
    d = pred - gt
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


@lru_cache(maxsize=16)
def _filter_matrix(n):
    r = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - r
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    F = np.zeros((n, n))
    for i in range(n):
        for k in range(SSIM_WINDOW):
            j = i + k - r
            if 0 <= j < n:
                F[i, j] = g[k]
    F.setflags(write=False)
    return F


def _blur(img, Fh, Fw):
    # zero-padded separable Gaussian window on each channel; self-adjoint since g is symmetric
    # img is (B, H, W, C)
    y = np.tensordot(Fh, img, axes=(1, 1))
    return np.tensordot(y, Fw, axes=(2, 1)).transpose(1, 0, 3, 2)


def _ssim_terms(pred, gt):
    H, W = pred.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")
    Fh, Fw = _filter_matrix(H), _filter_matrix(W)
    mx, my, exx, eyy, exy = _blur(np.stack([pred, gt, pred * pred, gt * gt, pred * gt]), Fh, Fw)
    a1 = 2 * mx * my + C1
    a2 = 2 * (exy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (exx - mx * mx) + (eyy - my * my) + C2
    smap = a1 * a2 / (b1 * b2)
    return smap, (Fh, Fw, mx, my, a1, a2, b1, b2)


def ssim(pred, gt):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, zero padding)."""
    pred, gt = _check_pair(pred, gt)
    smap, _ = _ssim_terms(pred, gt)
    return float(np.mean(smap))


def dssim_loss(pred, gt):
    """``(1 - SSIM) / 2`` and its exact gradient w.r.t. ``pred``."""
    pred, gt = _check_pair(pred, gt)
    smap, (Fh, Fw, mx, my, a1, a2, b1, b2) = _ssim_terms(pred, gt)
    loss = 0.5 * (1.0 - float(np.mean(smap)))
    w = -0.5 / smap.size
    d_mx = smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    d_exx = smap * (-1.0 / b2)
    d_exy = smap * (2.0 / a2)
    b_mx, b_exx, b_exy = _blur(np.stack([w * d_mx, w * d_exx, w * d_exy]), Fh, Fw)
    grad = b_mx + 2 * pred * b_exx + gt * b_exy
    return loss, grad


def psnr(pred, gt):
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
