"""Image quality metrics over tonemapped HDR predictions.

Metrics run on y/(1+y)-tonemapped images clamped to [0, 1]; the transfer
curve is fixed here so reported numbers are self-consistent. PSNR caps at
99 dB for identical images; SSIM uses the standard 11x11 Gaussian window
(sigma 1.5) over valid positions only.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def tonemap(img: np.ndarray) -> np.ndarray:
    """HDR -> [0, 1] via y / (1 + y), clamped."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(img / (1.0 + img), 0.0, 1.0)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) over all pixels and channels of [0, 1] images."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_stats(img: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    mu = np.tensordot(win, kernel, axes=([2, 3], [0, 1]))
    musq = np.tensordot(win * win, kernel, axes=([2, 3], [0, 1]))
    return mu, musq


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean local SSIM, per channel then averaged, over [0, 1] images."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    h, w = pred.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InvalidInputError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for c in range(pred.shape[2]):
        p, g = pred[:, :, c], gt[:, :, c]
        mu_p, musq_p = _local_stats(p, kernel)
        mu_g, musq_g = _local_stats(g, kernel)
        win_pg = np.lib.stride_tricks.sliding_window_view(p * g, kernel.shape)
        mu_pg = np.tensordot(win_pg, kernel, axes=([2, 3], [0, 1]))
        var_p = musq_p - mu_p ** 2
        var_g = musq_g - mu_g ** 2
        cov = mu_pg - mu_p * mu_g
        num = (2.0 * mu_p * mu_g + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_p ** 2 + mu_g ** 2 + SSIM_C1) * (var_p + var_g + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
