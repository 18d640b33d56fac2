"""Synthetic ellipse phantoms and simulated k-space measurements."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .fourier import ForwardOperator
from .recon import MEASUREMENT_NOISE, noise


@dataclass(frozen=True)
class PhantomSpec:
    """Random-ellipse phantom family.

    Each image is a sum of ``n_ellipses`` ellipses with linearly varying
    intensity plus a low-pass texture, rescaled so that ``max |t| = 1``.
    """

    size: int = 64
    n_ellipses: tuple = (3, 8)
    intensity: tuple = (0.2, 1.0)
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_ellipses
        if self.size < 8 or self.size % 2:
            raise ConfigError(f"phantom size must be even and >= 8, got {self.size}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad ellipse count range {self.n_ellipses}")
        if not 0 < self.intensity[0] <= self.intensity[1]:
            raise ConfigError(f"bad intensity range {self.intensity}")
        if self.texture < 0:
            raise ConfigError("texture must be >= 0")


def _smooth_noise(rng, n, cutoff=0.15) -> np.ndarray:
    f = np.fft.fftfreq(n)
    lowpass = np.exp(-(f[:, None] ** 2 + f[None, :] ** 2) / (2 * cutoff ** 2))
    field = np.fft.ifft2(np.fft.fft2(rng.standard_normal((n, n))) * lowpass).real
    return field / (np.abs(field).max() + 1e-12)


def phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Image ``index`` of the family as a ``(2, H, W)`` array with zero imaginary part."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    yy, xx = np.mgrid[-1:1:n * 1j, -1:1:n * 1j]
    img = np.zeros((n, n))
    for _ in range(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1)):
        cx, cy = rng.uniform(-0.5, 0.5, 2)
        a, b = rng.uniform(0.1, 0.6, 2)
        ang = rng.uniform(0, np.pi)
        c, s = np.cos(ang), np.sin(ang)
        u = ((xx - cx) * c + (yy - cy) * s) / a
        v = (-(xx - cx) * s + (yy - cy) * c) / b
        inside = u ** 2 + v ** 2 <= 1
        level = rng.uniform(*spec.intensity)
        ramp = 1 + 0.3 * (rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v)
        img += inside * level * ramp
    img += spec.texture * _smooth_noise(rng, n) * (img > 0)
    img /= np.abs(img).max()
    return np.stack([img, np.zeros_like(img)])


def generate_phantoms(spec: PhantomSpec, n: int, start: int = 0) -> np.ndarray:
    """``(n, 2, H, W)`` stack of phantoms ``start .. start + n - 1``."""
    if n < 1:
        raise ConfigError(f"need at least one phantom, got n={n}")
    return np.stack([phantom(spec, start + i) for i in range(n)])


def simulate_measurements(t, A: ForwardOperator, noise_sigma: float = 0.0, seed: int = 0, index: int = 0):
    """``y = A t`` plus optional Gaussian noise on the sampled locations."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-2:] != A.shape:
        raise ValidationError(f"image shape {t.shape[-2:]} does not match operator {A.shape}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    y = A.forward(t)
    if noise_sigma > 0:
        y = y + noise(seed, MEASUREMENT_NOISE, 0, index, y.shape, noise_sigma) * A.mask.keep
    return y
