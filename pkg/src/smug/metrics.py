"""Image-quality metrics on magnitude images and the shared evaluation row type."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

PSNR_CAP = 99.0


def magnitude(x) -> np.ndarray:
    """``|x|`` for a ``(2, H, W)`` image; plain ``(H, W)`` arrays pass through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim >= 3 and x.shape[-3] == 2:
        return np.hypot(x[..., 0, :, :], x[..., 1, :, :])
    return x


def _pair(x, t):
    mx, mt = magnitude(x), magnitude(t)
    if mx.shape != mt.shape:
        raise ValidationError(f"shape mismatch: {mx.shape} vs {mt.shape}")
    return mx, mt


def psnr(x, t) -> float:
    """``10 log10(peak^2 / MSE)`` on magnitudes, with ``peak = max |t|``; ``inf`` when identical."""
    mx, mt = _pair(x, t)
    mse = float(np.mean((mx - mt) ** 2))
    peak = float(mt.max())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped(db: float) -> float:
    return min(db, PSNR_CAP)


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, t, window=11, sigma_w=1.5, k1=0.01, k2=0.03) -> float:
    """Mean local SSIM over all fully contained windows; data range is ``max |t|``."""
    mx, mt = _pair(x, t)
    if min(mx.shape) < window:
        raise ValidationError(f"images smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma_w)
    c1 = (k1 * float(mt.max())) ** 2
    c2 = (k2 * float(mt.max())) ** 2

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mu_x, mu_t = filt(mx), filt(mt)
    sxx = filt(mx * mx) - mu_x ** 2
    stt = filt(mt * mt) - mu_t ** 2
    sxt = filt(mx * mt) - mu_x * mu_t
    num = (2 * mu_x * mu_t + c1) * (2 * sxt + c2)
    den = (mu_x ** 2 + mu_t ** 2 + c1) * (sxx + stt + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsRow:
    """One evaluation result; field order is the CSV column order."""

    method: str
    kind: str
    grid_value: float
    clean_psnr: float
    clean_ssim: float
    noise_psnr: float
    noise_ssim: float
    robust_psnr: float
    robust_ssim: float
    rob_error_mean: float
    bound_Cn: float
    holds: object  # True / False, or "na" when the certificate does not apply
    wall_seconds: float

    @classmethod
    def columns(cls) -> tuple:
        return tuple(f.name for f in fields(cls))

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("clean_psnr", "noise_psnr", "robust_psnr"):
            d[k] = capped(d[k])
        return d


METRICS_COLUMNS = MetricsRow.columns()
