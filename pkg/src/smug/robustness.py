"""Measurement perturbations, robustness evaluation and the smoothing Lipschitz bounds.

The certified constant for ``n`` smoothed unrolling steps is

    r   = M alpha / (sqrt(2 pi) sigma)
    C_n = alpha ||A|| (1 - r^n) / (1 - r) + ||A|| r^n

with ``M = 2 max ||D(x)||`` and ``alpha = ||(A^H A + lam I)^-1||``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError, ValidationError
from .fourier import ForwardOperator, make_vd_mask
from .linalg import alpha_constant, operator_norm
from .metrics import MetricsRow, psnr, ssim
from .models import DenoiserNet, bound_M, denoise
from .recon import EVAL_NOISE, Reconstructor, noise

SWEEP_KINDS = ("epsilon", "sigma", "accel", "unroll_steps", "mc_samples")


@dataclass(frozen=True)
class AttackConfig:
    """l-inf PGD settings. Each step moves ``step_factor * eps / steps`` along the gradient sign."""

    epsilon_scale: float = 0.02
    steps: int = 10
    step_factor: float = 2.5
    seed: int = 0
    freeze_smoothing_noise: bool = True

    def __post_init__(self):
        if self.epsilon_scale < 0:
            raise ConfigError(f"epsilon_scale must be >= 0, got {self.epsilon_scale}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_factor <= 0:
            raise ConfigError("step_factor must be positive")

    def step_size(self, eps: float) -> float:
        return self.step_factor * eps / self.steps


@dataclass
class PerturbationResult:
    delta: np.ndarray
    objective: float  # best squared error reached
    history: list = field(default_factory=list)  # running best objective after each evaluation
    epsilon: float = 0.0


def epsilon_from_data(y, scale: float) -> float:
    """``scale`` times the largest real or imaginary magnitude in ``y``."""
    if scale < 0:
        raise ConfigError(f"scale must be >= 0, got {scale}")
    return float(scale * np.max(np.abs(np.asarray(y, dtype=np.float64))))


def _attack_recon(recon: Reconstructor, step: int, ac: AttackConfig) -> Reconstructor:
    if ac.freeze_smoothing_noise or not recon.smoothed:
        return recon
    seed = int(np.random.SeedSequence([recon.sc.seed, ac.seed, step]).generate_state(1)[0])
    return recon.with_(sc=replace(recon.sc, seed=seed))


def pgd_attack(recon: Reconstructor, A: ForwardOperator, y, t, ac: AttackConfig,
               epsilon: float | None = None) -> PerturbationResult:
    """Sign-gradient ascent on ``||recon(y + delta) - t||^2`` over the box ``|delta| <= eps``.

    Starts at ``delta = 0``; the box projection is the last operation of each
    step and the best iterate seen is returned.
    """
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    eps = epsilon_from_data(y, ac.epsilon_scale) if epsilon is None else float(epsilon)
    recon = recon.with_(A=A)
    delta = np.zeros_like(y)
    best, best_delta, history = -math.inf, delta.copy(), []
    h = ac.step_size(eps)
    for k in range(ac.steps + 1):
        rk = _attack_recon(recon, k, ac)

        def objective(d):
            return ad.sum_squares(ad.sub(rk(ad.add(y, d)), t))

        if k < ac.steps and eps > 0:
            leaf = ad.Tape().leaf(delta)
            out = objective(leaf)
            if not isinstance(out, ad.Variable):
                raise UsageError("attack objective does not depend on the perturbation")
            val, g = float(out.value), ad.backward(out)[leaf]
        else:
            val, g = float(ad.value_of(objective(delta))), None
        if val > best:
            best, best_delta = val, delta.copy()
        history.append(best)
        if g is None:
            break
        delta = np.clip(delta + h * np.sign(g), -eps, eps)
    return PerturbationResult(best_delta, best, history, eps)


def gaussian_perturb(y, sigma: float, seed: int, index: int = 0) -> np.ndarray:
    """``y + eta`` with i.i.d. ``N(0, sigma^2)`` entries on both planes."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    return y + noise(seed, EVAL_NOISE, 0, index, y.shape, sigma)


def random_box_delta(y, eps: float, seed: int, index: int = 0, keep=None) -> np.ndarray:
    """Uniform draw from ``[-eps, eps]`` per entry, zero outside ``keep`` when given."""
    rng = np.random.default_rng([int(seed), 77, int(index)])
    d = rng.uniform(-eps, eps, np.shape(y))
    return d * keep if keep is not None else d


# -- bounds -------------------------------------------------------------------

def ratio_r(sigma: float, M: float, alpha: float) -> float:
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive for the smoothing bound, got {sigma}")
    return M * alpha / (math.sqrt(2 * math.pi) * sigma)


def theorem1_bound(n: int, sigma: float, M: float, alpha: float, opnorm: float) -> float:
    """``C_n``; ``inf`` when the geometric growth overflows float64."""
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    r = ratio_r(sigma, M, alpha)
    if r == 1.0:
        return alpha * opnorm * n + opnorm
    try:
        rn = r ** n
    except OverflowError:
        return math.inf
    if math.isinf(rn):
        return math.inf
    return alpha * opnorm * (1 - rn) / (1 - r) + opnorm * rn


@dataclass
class BoundReport:
    n: int
    sigma: float
    M: float
    alpha: float
    opnorm: float
    r: float
    C_n: float
    errors: list = field(default_factory=list)
    delta_norms: list = field(default_factory=list)
    certified: bool = True  # False when M is an empirical estimate

    @property
    def holds(self) -> bool:
        return all(e <= self.C_n * d for e, d in zip(self.errors, self.delta_norms))

    def as_dict(self) -> dict:
        return {"n": self.n, "sigma": self.sigma, "M": self.M, "alpha": self.alpha, "opnorm": self.opnorm,
                "r": self.r, "C_n": self.C_n, "errors": list(self.errors), "delta_norms": list(self.delta_norms),
                "holds": self.holds, "certified": self.certified}


def empirical_M(theta: DenoiserNet, xs) -> float:
    """``2 max ||D(x)||`` over sample inputs; a lower estimate of the architectural bound, not a certificate."""
    return 2.0 * max(float(np.linalg.norm(denoise(theta, x))) for x in xs)


def robustness_errors(recon: Reconstructor, y, delta) -> list[float]:
    """``||x^n(y) - x^n(y + delta)||`` for every iterate ``n`` of one shared-noise run pair."""
    y = np.asarray(y, dtype=np.float64)
    a = recon.trace(y).iterates
    b = recon.trace(y + np.asarray(delta, dtype=np.float64)).iterates
    return [float(np.linalg.norm(ad.value_of(u) - ad.value_of(v))) for u, v in zip(a, b)]


def robustness_error(recon: Reconstructor, A: ForwardOperator, y, delta, seed: int | None = None) -> float:
    """Distance between the final reconstructions from ``y`` and ``y + delta`` (same smoothing seed)."""
    r = recon.with_(A=A)
    if seed is not None:
        r = r.with_(sc=replace(r.sc, seed=seed))
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(r(y) - r(y + np.asarray(delta, dtype=np.float64))))


@dataclass
class LemmaReport:
    sigma: float
    M: float
    lipschitz: float
    diff_norm: float
    delta_norm: float
    std_error: float
    samples: int

    @property
    def bound(self) -> float:
        return self.lipschitz * self.delta_norm

    @property
    def holds(self) -> bool:
        return self.diff_norm <= self.bound + 3.0 * self.std_error


def lemma1_check(theta: DenoiserNet, sigma: float, x, delta, T_large: int = 100_000, seed: int = 0,
                 M: float | None = None, chunk: int = 4096) -> LemmaReport:
    """Monte-Carlo test of ``||g(x) - g(x + delta)|| <= M / (sqrt(2 pi) sigma) ||delta||`` for smoothed ``g``.

    Both estimates share their noise draws; the slack is three standard errors
    of the per-sample difference.
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    M = bound_M(theta, x.shape) if M is None else M
    rng = np.random.default_rng([int(seed), 91])
    s1 = np.zeros_like(x)
    s2 = np.zeros_like(x)
    done = 0
    while done < T_large:
        m = min(chunk, T_large - done)
        eta = sigma * rng.standard_normal((m,) + x.shape)
        d = denoise(theta, x + eta) - denoise(theta, x + delta + eta)
        s1 += d.sum(axis=0)
        s2 += (d * d).sum(axis=0)
        done += m
    mean = s1 / T_large
    var = np.maximum(s2 / T_large - mean ** 2, 0.0) * T_large / max(T_large - 1, 1)
    se = float(np.sqrt(var.sum() / T_large))
    return LemmaReport(sigma, M, M / (math.sqrt(2 * math.pi) * sigma), float(np.linalg.norm(mean)),
                       float(np.linalg.norm(delta)), se, T_large)


def bound_audit(recon: Reconstructor, ys, ts, ac: AttackConfig, n_random: int = 100,
                M: float | None = None, n_values: Sequence[int] | None = None) -> list[BoundReport]:
    """Check ``robustness error <= C_n ||delta||`` for random box perturbations and the PGD one.

    Every iterate ``n`` of a single pair of runs is audited, so one trace
    covers all ``n <= N``.
    """
    if recon.method != "smug":
        raise ConfigError("the smoothing bound applies to the smug method")
    A = recon.A
    certified = M is None
    M = bound_M(recon.denoiser, A.shape) if M is None else M
    alpha = alpha_constant(A, recon.cfg.lam).value
    opn = operator_norm(A).value
    ns = list(range(1, recon.cfg.n_steps + 1)) if n_values is None else list(n_values)
    reports = {n: BoundReport(n, recon.sc.sigma, M, alpha, opn, ratio_r(recon.sc.sigma, M, alpha),
                              theorem1_bound(n, recon.sc.sigma, M, alpha, opn), certified=certified) for n in ns}
    for i, (y, t) in enumerate(zip(ys, ts)):
        eps = epsilon_from_data(y, ac.epsilon_scale)
        deltas = [random_box_delta(y, eps, ac.seed, i * n_random + j, A.mask.keep) for j in range(n_random)]
        deltas.append(pgd_attack(recon, A, y, t, ac).delta)
        for d in deltas:
            errs = robustness_errors(recon, y, d)
            dn = float(np.linalg.norm(d))
            for n in ns:
                reports[n].errors.append(errs[n])
                reports[n].delta_norms.append(dn)
    return [reports[n] for n in ns]


# -- evaluation and sweeps ----------------------------------------------------

@dataclass
class EvalContext:
    """Everything an evaluation needs besides the reconstructor.

    ``measure(A, t, index)`` re-simulates measurements when the sweep changes
    the sampling operator. ``noise_scale`` sets the Gaussian-noise level
    relative to ``max |y|``. ``fixed_deltas`` replaces PGD with given
    perturbations (used by the sigma sweep so that every grid point sees the
    same inputs).
    """

    ys: list
    ts: list
    ac: AttackConfig = AttackConfig()
    noise_scale: float = 0.01
    noise_seed: int = 0
    measure: Callable | None = None
    mask_seed: int = 0
    center_frac: float = 0.08
    fixed_deltas: list | None = None
    record_timing: bool = True
    certify: bool = True


def _certificate(recon: Reconstructor, errors, delta_norms):
    if recon.method != "smug" or recon.sc.sigma <= 0:
        return math.nan, "na"
    M = bound_M(recon.denoiser, recon.A.shape)
    alpha = alpha_constant(recon.A, recon.cfg.lam).value
    opn = operator_norm(recon.A).value
    cn = theorem1_bound(recon.cfg.n_steps, recon.sc.sigma, M, alpha, opn)
    return cn, bool(all(e <= cn * d for e, d in zip(errors, delta_norms)))


def evaluate(recon: Reconstructor, ctx: EvalContext, kind="eval", grid_value=math.nan,
             ys=None) -> tuple[MetricsRow, list]:
    """Clean, Gaussian-noise and worst-case metrics averaged over the test items.

    Returns the row and the perturbations used for the worst case.
    """
    t0 = time.perf_counter()
    ys = ctx.ys if ys is None else ys
    acc = {k: [] for k in ("cp", "cs", "np", "ns", "rp", "rs", "re", "dn")}
    deltas = []
    for i, (y, t) in enumerate(zip(ys, ctx.ts)):
        x = recon(y)
        acc["cp"].append(psnr(x, t))
        acc["cs"].append(ssim(x, t))
        yn = gaussian_perturb(y, ctx.noise_scale * float(np.max(np.abs(y))), ctx.noise_seed, i)
        xn = recon(yn)
        acc["np"].append(psnr(xn, t))
        acc["ns"].append(ssim(xn, t))
        d = ctx.fixed_deltas[i] if ctx.fixed_deltas is not None else pgd_attack(recon, recon.A, y, t, ctx.ac).delta
        deltas.append(d)
        xr = recon(y + d)
        acc["rp"].append(psnr(xr, t))
        acc["rs"].append(ssim(xr, t))
        acc["re"].append(float(np.linalg.norm(x - xr)))
        acc["dn"].append(float(np.linalg.norm(d)))
    cn, holds = _certificate(recon, acc["re"], acc["dn"]) if ctx.certify else (math.nan, "na")
    wall = time.perf_counter() - t0 if ctx.record_timing else 0.0
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    row = MetricsRow(recon.method, kind, float(grid_value), m["cp"], m["cs"], m["np"], m["ns"], m["rp"], m["rs"],
                     m["re"], cn, holds, wall)
    return row, deltas


def sweep(kind: str, grid, recons: dict, ctx: EvalContext) -> list[MetricsRow]:
    """Evaluate every reconstructor at every grid point of one swept quantity.

    ``recons`` maps method names to :class:`Reconstructor` objects trained at
    the nominal setting; the sweep only changes evaluation-time parameters.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; choose from {SWEEP_KINDS}")
    if not recons:
        raise ConfigError("sweep needs at least one trained reconstructor")
    for name, r in recons.items():
        if r is None:
            raise ConfigError(f"missing checkpoint for {name}")
    rows = []
    for g in grid:
        for name, r in recons.items():
            c, ys = ctx, None
            if kind == "epsilon":
                c = replace(ctx, ac=replace(ctx.ac, epsilon_scale=float(g)))
            elif kind == "sigma":
                if r.smoothed:
                    r = r.with_(sc=replace(r.sc, sigma=float(g)))
            elif kind == "unroll_steps":
                r = r.with_(cfg=replace(r.cfg, n_steps=int(g)))
            elif kind == "mc_samples":
                if r.smoothed:
                    r = r.with_(sc=replace(r.sc, samples=int(g)))
            elif kind == "accel":
                if ctx.measure is None:
                    raise ConfigError("accel sweep needs a measurement function")
                h, w = r.A.shape
                A = ForwardOperator(make_vd_mask(h, w, float(g), ctx.center_frac, ctx.mask_seed))
                r = r.with_(A=A)
                ys = [ctx.measure(A, t, i) for i, t in enumerate(ctx.ts)]
            row, _ = evaluate(r, c, kind, float(g), ys)
            row.method = name
            rows.append(row)
    return rows
