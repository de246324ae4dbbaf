"""PSNR and SSIM on ``[0, 1]`` tensors."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, SizeError
from .tensor import Tensor

PSNR_CAP = 100.0


def _arr(x) -> np.ndarray:
    return (x.data if isinstance(x, Tensor) else np.asarray(x)).astype(np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``PSNR_CAP``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, data_range: float = 1.0, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window, per channel then averaged.

    Only fully-covered window positions are used (no padding), so both
    spatial extents must be at least ``win``.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-1] < win or a.shape[-2] < win:
        raise SizeError(f"ssim needs spatial extents >= {win}, got {a.shape[-2:]}")
    g = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
