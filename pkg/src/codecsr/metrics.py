"""Image quality metrics used for evaluation and acceptance gates.

Both metrics are plain numpy on frame arrays; nothing here touches the
tensor engine, so the numbers are independent of the network code paths
they judge.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .codec import Frame, luma
from .errors import require

PSNR_CAP = 99.0


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Frame) else np.asarray(x)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio over all samples, capped at 99 dB."""
    xa, xb = _as_array(a), _as_array(b)
    require(xa.shape == xb.shape, "psnr needs matching shapes")
    diff = xa.astype(np.float64) - xb.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    value = 10.0 * math.log10((data_range * data_range) / mse)
    return min(value, PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean structural similarity on luma, 11x11 Gaussian window (sigma 1.5).

    Only windows fully inside the image contribute; frames must be at
    least 11 pixels in each dimension. RGB inputs are reduced to luma
    first; single planes are used as-is.
    """
    xa, xb = _as_array(a), _as_array(b)
    require(xa.shape == xb.shape, "ssim needs matching shapes")
    if xa.ndim == 3:
        xa = luma(Frame(np.ascontiguousarray(xa.astype(np.float32))))
        xb = luma(Frame(np.ascontiguousarray(xb.astype(np.float32))))
    require(xa.ndim == 2, "ssim expects images or luma planes")
    size = 11
    require(min(xa.shape) >= size, f"ssim needs at least {size}x{size} pixels")
    xa = xa.astype(np.float64)
    xb = xb.astype(np.float64)
    kernel = _gaussian_kernel(size, 1.5)

    def smooth(img):
        tmp = ndimage.correlate1d(img, kernel, axis=0, mode="nearest")
        return ndimage.correlate1d(tmp, kernel, axis=1, mode="nearest")

    margin = size // 2
    crop = (slice(margin, -margin), slice(margin, -margin))
    mu_a = smooth(xa)[crop]
    mu_b = smooth(xb)[crop]
    var_a = smooth(xa * xa)[crop] - mu_a * mu_a
    var_b = smooth(xb * xb)[crop] - mu_b * mu_b
    cov = smooth(xa * xb)[crop] - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
