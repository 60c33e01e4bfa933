"""Image-quality metrics: MSE, PSNR, SSIM.

PSNR of identical images is reported as +inf and capped at 99 dB in
tables.  SSIM uses an 11x11 Gaussian window (sigma 1.5) over the valid
interior, the canonical constants C1 = (0.01 L)^2 and C2 = (0.03 L)^2,
and returns the mean of the per-window map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, ShapeMismatchError

PSNR_CAP_DB = 99.0


def mse(a, b):
    """Mean over pixels of the squared (per-channel summed) difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse: shapes {a.shape} vs {b.shape}")
    d2 = np.square(a - b)
    if a.ndim == 3:
        d2 = d2.sum(axis=-1)
    return float(d2.mean())


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); +inf for identical images."""
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / m))


def psnr_capped(a, b, peak=1.0):
    return min(psnr(a, b, peak), PSNR_CAP_DB)


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0  # dynamic range L

    @property
    def c1(self):
        return (self.k1 * self.peak) ** 2

    @property
    def c2(self):
        return (self.k2 * self.peak) ** 2

    def kernel(self):
        half = self.window // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        k = np.exp(-0.5 * (x / self.sigma) ** 2)
        return k / k.sum()


def _windowed(img, k1d, half):
    out = correlate1d(img, k1d, axis=0, mode="nearest")
    out = correlate1d(out, k1d, axis=1, mode="nearest")
    return out[half:-half, half:-half]


def ssim(a, b, cfg: SsimConfig | None = None):
    """Mean structural similarity over valid windows of two 2-D images."""
    cfg = cfg or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim: shapes {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ConfigError("ssim expects 2-D grayscale images")
    if min(a.shape) < cfg.window:
        raise ConfigError(f"ssim: image {a.shape} smaller than {cfg.window}x{cfg.window} window")
    k = cfg.kernel()
    half = cfg.window // 2
    mu_a = _windowed(a, k, half)
    mu_b = _windowed(b, k, half)
    var_a = _windowed(a * a, k, half) - mu_a * mu_a
    var_b = _windowed(b * b, k, half) - mu_b * mu_b
    cov = _windowed(a * b, k, half) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def image_report(pairs, peak=1.0):
    """Per-image metrics plus both aggregation orders.

    pairs is a sequence of (predicted, reference) images.  Because PSNR is
    logarithmic, averaging per-image PSNR differs from converting the mean
    MSE; both are reported.
    """
    rows = []
    for pred, ref in pairs:
        m = mse(pred, ref)
        rows.append(
            {
                "mse": m,
                "psnr": min(psnr(pred, ref, peak), PSNR_CAP_DB),
                "ssim": ssim(pred, ref) if np.asarray(pred).ndim == 2 else float("nan"),
            }
        )
    mean_mse = float(np.mean([r["mse"] for r in rows]))
    summary = {
        "mse": mean_mse,
        "psnr_mean_of_images": float(np.mean([r["psnr"] for r in rows])),
        "psnr_of_mean_mse": (
            PSNR_CAP_DB if mean_mse == 0 else float(10.0 * np.log10(peak * peak / mean_mse))
        ),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "count": len(rows),
    }
    return rows, summary
