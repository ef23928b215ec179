"""Image reconstruction metrics for float images in [0, 1].

PSNR is computed against a unit dynamic range and capped so identical
images report 100 dB instead of infinity. SSIM follows the standard
single-scale formulation: 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, L=1, mean over valid (fully overlapping) windows, computed on
the Rec. 601 luminance for color inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_REC601 = np.array([0.299, 0.587, 0.114])


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over a [0, 1] range, capped at
    PSNR_CAP_DB."""
    _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img.astype(np.float64) @ _REC601
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity over valid windows of the luminance."""
    _check_pair(a, b)
    x = _luminance(a)
    y = _luminance(b)
    if x.shape[0] < _SSIM_WINDOW or x.shape[1] < _SSIM_WINDOW:
        raise ValueError(
            f"image must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {x.shape}"
        )
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = 0.01**2
    c2 = 0.03**2

    mu_x = _windowed_mean(x, window)
    mu_y = _windowed_mean(y, window)
    xx = _windowed_mean(x * x, window) - mu_x**2
    yy = _windowed_mean(y * y, window) - mu_y**2
    xy = _windowed_mean(x * y, window) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))
