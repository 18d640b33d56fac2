"""Unrolled reconstruction pipelines: MoDL, RS-E2E, SMUG, Weighted SMUG and ISTA-Net.

All pipelines are written against :mod:`smug.autodiff` primitives, so passing
Variables (for the measurements or inside a ``params`` override) yields a
differentiable run and passing arrays yields a plain numeric one.

Smoothing noise comes from counter-based streams keyed by
``(seed, stream, step, sample)``: any single draw can be reproduced in
isolation, and noise never enters the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .fourier import ForwardOperator
from .models import DenoiserNet, IstaNet, WeightEncoder, denoise, encode_weight, ista_prox

# noise stream tags
IMAGE_NOISE = 1
KSPACE_NOISE = 2
USTAB_NOISE = 3
PRETRAIN_NOISE = 4
MEASUREMENT_NOISE = 5
EVAL_NOISE = 6


@dataclass(frozen=True)
class UnrollConfig:
    n_steps: int = 8
    lam: float = 1.0
    cg_tol: float = 1e-6
    cg_max: int = 50

    def __post_init__(self):
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.cg_tol <= 0 or self.cg_max < 1:
            raise ConfigError("cg_tol must be positive and cg_max >= 1")


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.01
    samples: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.samples < 1:
            raise ConfigError(f"samples must be >= 1, got {self.samples}")


@dataclass
class ReconTrace:
    iterates: list  # x^0 .. x^N, arrays or Variables
    denoiser_inputs: list = field(default_factory=list)
    denoiser_outputs: list = field(default_factory=list)
    cg_log: list = field(default_factory=list)

    @property
    def final(self):
        return self.iterates[-1]

    @property
    def cg_residuals(self) -> list[float]:
        return [r.residual for r in self.cg_log]

    @property
    def cg_converged(self) -> bool:
        return all(r.converged for r in self.cg_log)

    def rows(self) -> list[dict]:
        """Per-iterate norms and forward CG residuals, for CSV export."""
        fwd = self.cg_log[: len(self.iterates) - 1]
        out = []
        for n, x in enumerate(self.iterates):
            out.append({
                "step": n,
                "norm": float(np.linalg.norm(ad.value_of(x))),
                "cg_residual": fwd[n - 1].residual if n > 0 and n - 1 < len(fwd) else 0.0,
            })
        return out


def noise(seed: int, stream: int, step: int, sample: int, shape, sigma: float) -> np.ndarray:
    rng = np.random.default_rng([int(seed), stream, step, sample])
    return sigma * rng.standard_normal(shape)


def noise_block(sc: SmoothingConfig, stream: int, step: int, shape) -> np.ndarray:
    """``(T, *shape)`` noise for one unrolling step."""
    return np.stack([noise(sc.seed, stream, step, t, shape, sc.sigma) for t in range(sc.samples)])


def dc_step(A: ForwardOperator, y, z, cfg: UnrollConfig, log: list | None = None):
    """``(A^H A + lam I)^{-1} (A^H y + lam z)`` by CG."""
    return ad.dc_solve_node(A, y, z, cfg.lam, cfg.cg_tol, cfg.cg_max, log)


def _initial(A, y):
    return ad.adjoint_op(A, y)


def modl_reconstruct(theta: DenoiserNet, A, y, cfg: UnrollConfig, params=None) -> ReconTrace:
    x = _initial(A, y)
    trace = ReconTrace([x])
    for _ in range(cfg.n_steps):
        z = denoise(theta, x, params)
        x = dc_step(A, y, z, cfg, trace.cg_log)
        trace.denoiser_outputs.append(z)
        trace.iterates.append(x)
    return trace


def smooth_denoise(theta: DenoiserNet, x, sc: SmoothingConfig, step: int = 0, params=None):
    """Monte-Carlo estimate of ``E_eta[D(x + eta)]`` with image-domain noise."""
    eta = noise_block(sc, IMAGE_NOISE, step, ad.value_of(x).shape)
    return ad.mean(denoise(theta, ad.add(x, eta), params), axis=0)


def weighted_smooth(theta: DenoiserNet, phi: WeightEncoder, x, sc: SmoothingConfig, step: int = 0,
                    params=None, enc_params=None):
    """``sum_t w_t D(x + eta_t) / sum_t w_t`` with ``w_t = E(x + eta_t)``.

    Draws the same noise as :func:`smooth_denoise` for equal ``(sc, step)``.
    """
    eta = noise_block(sc, IMAGE_NOISE, step, ad.value_of(x).shape)
    xs = ad.add(x, eta)
    return _weighted_mean(denoise(theta, xs, params), encode_weight(phi, xs, enc_params))


def _weighted_mean(samples, weights):
    t = ad.value_of(weights).shape[0]
    w = ad.reshape(weights, (t, 1, 1, 1))
    return ad.div(ad.sum(ad.mul(w, samples), axis=0), ad.sum(weights))


def smug_reconstruct(theta: DenoiserNet, A, y, cfg: UnrollConfig, sc: SmoothingConfig, params=None) -> ReconTrace:
    x = _initial(A, y)
    trace = ReconTrace([x])
    for n in range(cfg.n_steps):
        z = smooth_denoise(theta, x, sc, n, params)
        x = dc_step(A, y, z, cfg, trace.cg_log)
        trace.denoiser_outputs.append(z)
        trace.iterates.append(x)
    return trace


def wsmug_reconstruct(theta: DenoiserNet, phi: WeightEncoder, A, y, cfg: UnrollConfig, sc: SmoothingConfig,
                      params=None, enc_params=None) -> ReconTrace:
    x = _initial(A, y)
    trace = ReconTrace([x])
    for n in range(cfg.n_steps):
        z = weighted_smooth(theta, phi, x, sc, n, params, enc_params)
        x = dc_step(A, y, z, cfg, trace.cg_log)
        trace.denoiser_outputs.append(z)
        trace.iterates.append(x)
    return trace


def rs_e2e_reconstruct(theta: DenoiserNet, A, y, cfg: UnrollConfig, sc: SmoothingConfig, params=None,
                       log: list | None = None):
    """Average of full MoDL runs on ``y + eta_t``; each run keeps its noisy ``y`` in every DC step."""
    shape = ad.value_of(y).shape
    eta = np.stack([noise(sc.seed, KSPACE_NOISE, 0, t, shape, sc.sigma) for t in range(sc.samples)])
    ys = ad.add(y, eta * A.mask.keep)
    x = _initial(A, ys)
    for _ in range(cfg.n_steps):
        x = dc_step(A, ys, denoise(theta, x, params), cfg, log)
    return ad.mean(x, axis=0)


ISTA_MODES = ("vanilla", "smug", "wsmug")


def istanet_reconstruct(net: IstaNet, A, y, cfg: UnrollConfig, sc: SmoothingConfig, mode="vanilla",
                        encoder: WeightEncoder | None = None, params=None, enc_params=None) -> ReconTrace:
    """ISTA-Net phases: gradient step on the data term, then ``G(Soft(F(r), theta))``.

    In ``smug`` mode the transform block is averaged over noisy copies of ``r``;
    in ``wsmug`` mode that average is weighted by the encoder.
    """
    if mode not in ISTA_MODES:
        raise ConfigError(f"unknown ISTA-Net mode {mode!r}")
    if cfg.n_steps > net.spec.phases:
        raise ConfigError(f"{cfg.n_steps} phases requested but the network has {net.spec.phases}")
    if mode == "wsmug" and encoder is None:
        raise ConfigError("wsmug mode needs a weighting encoder")
    p = net.params if params is None else params
    x = _initial(A, y)
    trace = ReconTrace([x])
    for n in range(cfg.n_steps):
        resid = ad.sub(ad.forward_op(A, x), y)
        r = ad.sub(x, ad.mul(p[f"phase{n}.step"], ad.adjoint_op(A, resid)))
        trace.denoiser_inputs.append(r)
        if mode == "vanilla":
            x = ista_prox(net, n, r, p)
        else:
            rs = ad.add(r, noise_block(sc, IMAGE_NOISE, n, ad.value_of(r).shape))
            outs = ista_prox(net, n, rs, p)
            if mode == "smug":
                x = ad.mean(outs, axis=0)
            else:
                x = _weighted_mean(outs, encode_weight(encoder, rs, enc_params))
        trace.iterates.append(x)
    return trace


METHODS = ("modl", "rs_e2e", "smug", "wsmug", "istanet", "istanet_smug", "istanet_wsmug")


@dataclass
class Reconstructor:
    """A method bound to its models, forward operator and configs.

    Calling it maps measurements to the final image. ``params`` and
    ``enc_params`` override the stored parameters (e.g. with tape Variables).
    """

    method: str
    A: ForwardOperator
    cfg: UnrollConfig
    sc: SmoothingConfig
    denoiser: DenoiserNet | None = None
    encoder: WeightEncoder | None = None
    istanet: IstaNet | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method.startswith("istanet"):
            if self.istanet is None:
                raise ConfigError(f"{self.method} needs ISTA-Net parameters")
        elif self.denoiser is None:
            raise ConfigError(f"{self.method} needs a denoiser")
        if self.method.endswith("wsmug") and self.encoder is None:
            raise ConfigError(f"{self.method} needs a weighting encoder")

    @property
    def smoothed(self) -> bool:
        return self.method in ("rs_e2e", "smug", "wsmug", "istanet_smug", "istanet_wsmug")

    def with_(self, **changes) -> "Reconstructor":
        return replace(self, **changes)

    def trace(self, y, params=None, enc_params=None) -> ReconTrace:
        m = self.method
        if m == "modl":
            return modl_reconstruct(self.denoiser, self.A, y, self.cfg, params)
        if m == "smug":
            return smug_reconstruct(self.denoiser, self.A, y, self.cfg, self.sc, params)
        if m == "wsmug":
            return wsmug_reconstruct(self.denoiser, self.encoder, self.A, y, self.cfg, self.sc, params, enc_params)
        if m == "rs_e2e":
            log: list = []
            x = rs_e2e_reconstruct(self.denoiser, self.A, y, self.cfg, self.sc, params, log)
            return ReconTrace([_initial(self.A, y), x], cg_log=log)
        mode = {"istanet": "vanilla", "istanet_smug": "smug", "istanet_wsmug": "wsmug"}[m]
        return istanet_reconstruct(self.istanet, self.A, y, self.cfg, self.sc, mode, self.encoder, params, enc_params)

    def __call__(self, y, params=None, enc_params=None):
        return self.trace(y, params, enc_params).final
