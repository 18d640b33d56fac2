"""Conjugate gradients and power iteration for the operators in :mod:`smug.fourier`."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .fourier import ForwardOperator

_PLANE_AXES = (-3, -2, -1)


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    residual: float  # worst relative residual over the batch
    iterations: int
    converged: bool


def _dot(a, b):
    return np.sum(a * b, axis=_PLANE_AXES, keepdims=True)


def cg(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, x0=None, tol=1e-6, max_iter=50) -> CGResult:
    """Solve ``apply(x) = b`` for a symmetric positive definite real operator.

    ``b`` may carry leading batch dimensions in front of the ``(2, H, W)``
    planes; each batch element is solved independently and stops updating once
    its relative residual drops below ``tol``.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = _dot(r, r)
    bnorm = np.sqrt(_dot(b, b))
    bnorm = np.where(bnorm == 0, 1.0, bnorm)
    active = np.sqrt(rr) / bnorm > tol
    it = 0
    while active.any() and it < max_iter:
        Ap = apply(p)
        pAp = _dot(p, Ap)
        alpha = np.where(active, rr / np.where(pAp == 0, 1.0, pAp), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = _dot(r, r)
        beta = np.where(active, rr_new / np.where(rr == 0, 1.0, rr), 0.0)
        p = np.where(active, r + beta * p, p)
        rr = np.where(active, rr_new, rr)
        active = np.sqrt(rr) / bnorm > tol
        it += 1
    res = float(np.max(np.sqrt(rr) / bnorm))
    return CGResult(x, res, it, not active.any())


def dc_solve(A: ForwardOperator, rhs: np.ndarray, lam: float, tol=1e-6, max_iter=50) -> CGResult:
    """Solve ``(A^H A + lam I) x = rhs`` by CG."""
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    return cg(lambda v: A.normal(v) + lam * v, rhs, tol=tol, max_iter=max_iter)


@dataclass(frozen=True)
class SpectralNormResult:
    value: float
    iterations: int
    converged: bool

    def __float__(self):
        return self.value


def spectral_norm(op: Callable, shape, iters=100, tol=1e-10, seed=0,
                  adjoint: Callable | None = None, self_adjoint=False) -> SpectralNormResult:
    """Largest singular value of a linear map by power iteration.

    With ``self_adjoint=True`` the map is assumed symmetric positive
    semi-definite and iterated directly. Otherwise power iteration runs on
    ``adjoint(op(v))`` and the square root of its top eigenvalue is returned.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    if not self_adjoint and adjoint is None:
        raise ConfigError("adjoint is required unless self_adjoint=True")
    gram = op if self_adjoint else (lambda v: adjoint(op(v)))
    v = np.random.default_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    est = 0.0
    converged = False
    for k in range(1, iters + 1):
        u = gram(v)
        new = float(np.linalg.norm(u))
        if new == 0.0:
            est, converged = 0.0, True
            break
        v = u / new
        if abs(new - est) <= tol * new:
            est, converged = new, True
            break
        est = new
    value = est if self_adjoint else float(np.sqrt(est))
    if not converged:
        warnings.warn(f"power iteration did not converge in {iters} iterations", RuntimeWarning, stacklevel=2)
    return SpectralNormResult(value, k, converged)


def operator_norm(A: ForwardOperator, iters=100, tol=1e-12, seed=0) -> SpectralNormResult:
    """``||A||_2`` for the masked unitary DFT."""
    h, w = A.shape
    return spectral_norm(A.forward, (2, h, w), iters=iters, tol=tol, seed=seed, adjoint=A.adjoint)


def alpha_constant(A: ForwardOperator, lam=1.0, iters=200, tol=1e-12, cg_tol=1e-12, cg_max=100,
                   seed=0) -> SpectralNormResult:
    """``||(A^H A + lam I)^{-1}||_2`` by power iteration over CG solves."""
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    h, w = A.shape
    flagged = []

    def inv(v):
        res = dc_solve(A, v, lam, tol=cg_tol, max_iter=cg_max)
        if not res.converged:
            flagged.append(res.residual)
        return res.x

    out = spectral_norm(inv, (2, h, w), iters=iters, tol=tol, seed=seed, self_adjoint=True)
    if flagged:
        warnings.warn(f"CG did not converge in {len(flagged)} solves", RuntimeWarning, stacklevel=2)
        return SpectralNormResult(out.value, out.iterations, False)
    return out
