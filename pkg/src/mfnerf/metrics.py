"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeError


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all pixels and channels; ``inf`` when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _window_mean(img, taps):
    # separable Gaussian, then keep only windows lying fully inside the image
    r = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _gray(a):
    a = np.asarray(a, dtype=np.float64)
    return a.mean(axis=-1) if a.ndim == 3 else a


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity over all valid 11x11 Gaussian windows.

    Colour images are reduced to grayscale by the channel mean.
    """
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")
    x, y = _gray(a), _gray(b)
    if x.ndim != 2:
        raise ShapeError("expected an (H, W) or (H, W, C) image")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    taps = _gaussian_taps()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = _window_mean(x, taps), _window_mean(y, taps)
    vx = _window_mean(x * x, taps) - mx * mx
    vy = _window_mean(y * y, taps) - my * my
    cxy = _window_mean(x * y, taps) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
