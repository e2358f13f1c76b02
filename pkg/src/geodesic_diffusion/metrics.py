"""PSNR and SSIM for small images."""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LengthMismatch

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 100 dB once MSE < peak^2 * 1e-10."""
    a, b = _pair(a, b)
    if not peak > 0:
        raise ConfigError("peak must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse < peak * peak * 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / mse)


def psnr_pm1(a, b) -> float:
    """PSNR of images in [-1, 1] after mapping them to [0, 1] (peak 1)."""
    a, b = _pair(a, b)
    return psnr((a + 1) / 2, (b + 1) / 2, 1.0)


def ssim(a, b, peak: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over all ``window`` x ``window`` uniform windows at stride 1."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise LengthMismatch(f"expected 2-D images, got shape {a.shape}")
    if min(a.shape) < window:
        raise ConfigError(f"images must be at least {window} pixels on a side")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_pm1(a, b) -> float:
    a, b = _pair(a, b)
    return ssim((a + 1) / 2, (b + 1) / 2, 1.0)
