"""Evaluation metrics: vessel contrast-to-noise ratio, PSNR, SSIM.

The contrast metric works on a region of interest built by disk-dilating
the vessel mask; its statistics are computed with exactly rounded sums
(math.fsum), so any implementation that gathers the same pixel sets
produces bit-identical values regardless of summation order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import binary_dilation, correlate

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 2.0  # images live in [-1, 1]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DegenerateContrastError(ValueError):
    """The ROI has zero intensity spread; contrast is undefined."""


def disk_footprint(radius: float) -> np.ndarray:
    n = int(math.floor(radius))
    dy, dx = np.mgrid[-n:n + 1, -n:n + 1]
    return dy * dy + dx * dx <= radius * radius


def dilate_disk(mask: np.ndarray, radius: float) -> np.ndarray:
    """Union of Euclidean disks (d <= radius) centered on set pixels."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    return binary_dilation(mask, structure=disk_footprint(radius))


def luminance(image: np.ndarray) -> np.ndarray:
    """[H,W] or [C,H,W] image -> float64 luminance plane."""
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim == 3:
        if image.shape[0] == 1:
            return image[0].astype(np.float64)
        if image.shape[0] == 3:
            planes = image.astype(np.float64)
            return (LUMA_WEIGHTS[0] * planes[0] + LUMA_WEIGHTS[1] * planes[1]
                    + LUMA_WEIGHTS[2] * planes[2])
    raise ValueError(f"expected [H,W], [1,H,W] or [3,H,W], got {image.shape}")


def _fmean(values) -> float:
    return math.fsum(values) / len(values)


def fcnr(image: np.ndarray, vessel_mask: np.ndarray,
         radius: float = 3) -> float:
    """|mean(background) - mean(vessel)| / std(ROI).

    ROI is the vessel mask dilated by a radius-``radius`` disk, background
    is ROI minus vessels, and the std is the population form over the
    whole ROI. Raises on an empty mask, an ROI without background pixels,
    or zero ROI spread.
    """
    lum = luminance(image)
    mask = np.asarray(vessel_mask, dtype=bool)
    if mask.shape != lum.shape:
        raise ValueError(f"mask shape {mask.shape} != image plane {lum.shape}")
    if not mask.any():
        raise ValueError("vessel mask is empty")
    roi = dilate_disk(mask, radius)
    background = roi & ~mask
    if not background.any():
        raise ValueError("ROI holds no background pixels")
    roi_vals = lum[roi]
    mu_roi = _fmean(roi_vals)
    sigma = math.sqrt(math.fsum((roi_vals - mu_roi) ** 2) / len(roi_vals))
    if sigma == 0.0:
        raise DegenerateContrastError("ROI intensity spread is zero")
    return abs(_fmean(lum[background]) - _fmean(lum[mask])) / sigma


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = DATA_RANGE) -> float:
    """10 log10(max^2 / MSE) in dB; identical inputs give +inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def _gaussian_window() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-offsets ** 2 / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    m = SSIM_WINDOW // 2
    crop = (slice(m, h - m), slice(m, w - m))

    def local(img):
        return correlate(img, win, mode="nearest")[crop]

    ex, ey = local(x), local(y)
    vx = local(x * x) - ex * ex
    vy = local(y * y) - ey * ey
    cxy = local(x * y) - ex * ey
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    s = ((2.0 * ex * ey + c1) * (2.0 * cxy + c2)
         / ((ex * ex + ey * ey + c1) * (vx + vy + c2)))
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity; multi-channel inputs average
    their per-channel scores."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_plane(a.astype(np.float64), b.astype(np.float64))
    if a.ndim == 3:
        scores = [_ssim_plane(a[c].astype(np.float64), b[c].astype(np.float64))
                  for c in range(a.shape[0])]
        return float(np.mean(scores))
    raise ValueError(f"expected [H,W] or [C,H,W], got {a.shape}")
