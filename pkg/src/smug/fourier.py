"""Complex images, unitary 2D DFT, Cartesian sampling masks and the forward model.

Images and k-space arrays share one layout: real float64 arrays of shape
``(..., 2, H, W)`` where channel 0 holds the real plane and channel 1 the
imaginary plane. k-space uses numpy's unshifted FFT ordering (DC at ``[0, 0]``)
and is stored dense, with zeros at unsampled locations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError


def to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def from_complex(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def check_planes(x, name="image") -> np.ndarray:
    """Validate a ``(..., 2, H, W)`` array and return it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ValidationError(f"{name} must have shape (..., 2, H, W), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite entries")
    return x


def dft2_unitary(x) -> np.ndarray:
    """Orthonormal 2D DFT of a two-plane image; preserves the l2 norm."""
    x = check_planes(x)
    return from_complex(np.fft.fft2(to_complex(x), norm="ortho"))


def idft2_unitary(y) -> np.ndarray:
    """Inverse of :func:`dft2_unitary`."""
    y = check_planes(y, "k-space")
    return from_complex(np.fft.ifft2(to_complex(y), norm="ortho"))


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space sampling pattern (unshifted layout).

    ``keep`` is an ``(H, W)`` boolean plane. ``accel`` and ``center_frac`` are the
    nominal parameters used to build it; ``seed`` is None for hand-made masks.
    """

    keep: np.ndarray
    accel: float = 1.0
    center_frac: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        if keep.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {keep.shape}")
        if not keep.any():
            raise ValidationError("mask must keep at least one k-space location")
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def shape(self) -> tuple[int, int]:
        return self.keep.shape

    @property
    def sampled_fraction(self) -> float:
        return float(self.keep.mean())

    @classmethod
    def full(cls, h: int, w: int) -> "SamplingMask":
        return cls(np.ones((h, w), dtype=bool), accel=1.0)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "accel": self.accel,
            "center_frac": self.center_frac,
            "seed": self.seed,
            "lines": [int(j) for j in np.flatnonzero(self.keep.any(axis=0))],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingMask":
        h, w = d["shape"]
        keep = np.zeros((h, w), dtype=bool)
        keep[:, d["lines"]] = True
        return cls(keep, accel=d["accel"], center_frac=d["center_frac"], seed=d["seed"])


def center_lines(w: int, n_center: int) -> np.ndarray:
    """Column indices (unshifted layout) of the ``n_center`` lowest frequencies."""
    centered = np.arange(w // 2 - n_center // 2, w // 2 - n_center // 2 + n_center)
    return np.sort((centered - w // 2) % w)


def make_vd_mask(h: int, w: int, accel: float, center_frac: float, seed: int) -> SamplingMask:
    """Variable-density Cartesian mask over phase-encode lines (columns).

    A fully sampled central band of ``round(center_frac * w)`` lines is kept and the
    remaining budget of ``round(w / accel)`` lines is drawn uniformly at random
    from outside the band.
    """
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ConfigError(f"mask dimensions must be even and >= 2, got {h}x{w}")
    if accel < 1:
        raise ConfigError(f"accel must be >= 1, got {accel}")
    if not 0 < center_frac < 1.0 / accel:
        raise ConfigError(f"need 0 < center_frac < 1/accel, got center_frac={center_frac}, accel={accel}")
    n_lines = int(round(w / accel))
    n_center = max(1, int(round(center_frac * w)))
    if n_center > n_lines:
        raise ConfigError(f"central band of {n_center} lines exceeds the budget of {n_lines} lines")
    center = center_lines(w, n_center)
    outside = np.setdiff1d(np.arange(w), center)
    rng = np.random.default_rng(seed)
    extra = rng.choice(outside, size=n_lines - n_center, replace=False)
    keep = np.zeros((h, w), dtype=bool)
    keep[:, np.concatenate([center, extra])] = True
    return SamplingMask(keep, accel=float(accel), center_frac=float(center_frac), seed=int(seed))


@dataclass(frozen=True)
class ForwardOperator:
    """Single-coil Cartesian MRI model ``A = M F`` with a unitary DFT."""

    mask: SamplingMask
    norm_convention: str = field(default="unitary", init=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def _check(self, x, name):
        x = check_planes(x, name)
        if x.shape[-2:] != self.shape:
            raise ValidationError(f"{name} spatial shape {x.shape[-2:]} does not match mask {self.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check(x, "image")
        return dft2_unitary(x) * self.mask.keep

    def adjoint(self, y) -> np.ndarray:
        y = self._check(y, "k-space")
        return idft2_unitary(y * self.mask.keep)

    def normal(self, x) -> np.ndarray:
        """``A^H A x``: an orthogonal projection onto the sampled subspace."""
        return self.adjoint(self.forward(x))

    def dense_matrix(self) -> np.ndarray:
        """Real ``(2HW, 2HW)`` matrix of ``A``; for small-problem oracles only."""
        h, w = self.shape
        n = 2 * h * w
        eye = np.eye(n).reshape(n, 2, h, w)
        return self.forward(eye).reshape(n, n).T


def apply_forward(A: ForwardOperator, x) -> np.ndarray:
    return A.forward(x)


def apply_adjoint(A: ForwardOperator, y) -> np.ndarray:
    return A.adjoint(y)
