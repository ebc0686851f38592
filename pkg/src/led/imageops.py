"""Value-convention conversions and the naive sharpening enhancer."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def to_float(raw: np.ndarray) -> np.ndarray:
    """8-bit [H,W] or [H,W,3] array -> [-1,1] float32 [C,H,W]."""
    if raw.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {raw.dtype}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or raw.shape[2] not in (1, 3):
        raise ValueError(f"expected [H,W] or [H,W,3] pixels, got {raw.shape}")
    img = raw.astype(np.float32) / 255.0 * 2.0 - 1.0
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1,1] float [C,H,W] -> 8-bit [H,W] (C=1) or [H,W,3]."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1,H,W] or [3,H,W], got {img.shape}")
    scaled = (np.clip(img, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    raw = np.rint(scaled).astype(np.uint8).transpose(1, 2, 0)
    return raw[:, :, 0] if raw.shape[2] == 1 else raw


def unsharp_mask(img: np.ndarray, sigma: float = 1.0,
                 amount: float = 1.0) -> np.ndarray:
    """Sharpen by adding back the high-pass residual; clamped to [-1,1].

    Stands in for "any existing enhancer" when exercising refinement.
    """
    if img.ndim != 3:
        raise ValueError(f"expected [C,H,W], got {img.shape}")
    blurred = gaussian_filter(img, (0.0, sigma, sigma), mode="reflect")
    return np.clip(img + amount * (img - blurred), -1.0, 1.0).astype(np.float32)
