"""Denoiser pre-training, SMUG / Weighted SMUG / ISTA-Net fine-tuning and the Adam optimizer.

Every loss returns a :class:`LossReport` whose ``objective`` is the tape
Variable to differentiate when parameters were passed in as Variables.
Training loops keep one parameter owner, reduce per-item gradients in fixed
item order and take one Adam step per batch.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError
from .fourier import ForwardOperator
from .models import (Checkpoint, DenoiserNet, EncoderSpec, IstaNet, WeightEncoder, denoise, init_encoder,
                     ista_inverse, ista_transform, save_checkpoint)
from .records import write_csv
from .recon import (PRETRAIN_NOISE, USTAB_NOISE, ReconTrace, SmoothingConfig, UnrollConfig, istanet_reconstruct,
                    modl_reconstruct, noise_block, rs_e2e_reconstruct, smug_reconstruct, wsmug_reconstruct)

log = logging.getLogger(__name__)

USTAB_VARIANTS = ("denoised_target", "denoised_iterate", "raw_target", "frozen_denoiser")
FINETUNE_MODES = ("modl", "rs_e2e", "smug", "wsmug")
TRAIN_CSV_FIELDS = ("epoch", "total", "recon", "ustab", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss settings.

    ``sigma`` and ``samples`` drive the smoothed forward pass during
    fine-tuning; ``ustab_samples`` is the number of fresh draws per UStab
    expectation and ``pretrain_sigma`` (default: ``sigma``) the noise level of
    the denoising pre-training.
    """

    epochs: int = 1
    batch_size: int = 2
    lr: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    lambda_ell: float = 1.0
    sigma: float = 0.01
    samples: int = 10
    ustab_samples: int = 2
    pretrain_sigma: float | None = None
    pretrain_samples: int = 2
    seed: int = 0
    ustab_variant: str = "denoised_target"
    clip_norm: float = 10.0
    ista_gamma: float = 0.1

    def __post_init__(self):
        b1, b2 = self.adam_betas
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.adam_betas}")
        if self.lambda_ell <= 0:
            raise ConfigError(f"lambda_ell must be positive, got {self.lambda_ell}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.ustab_variant not in USTAB_VARIANTS:
            raise ConfigError(f"unknown ustab_variant {self.ustab_variant!r}; choose from {USTAB_VARIANTS}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.sigma < 0 or (self.pretrain_sigma is not None and self.pretrain_sigma < 0):
            raise ConfigError("noise levels must be >= 0")

    @property
    def pretrain_noise(self) -> float:
        return self.sigma if self.pretrain_sigma is None else self.pretrain_sigma


@dataclass
class LossReport:
    total: float
    recon: float
    ustab: float
    history: list = field(default_factory=list)  # per-epoch rows, filled by the training loops
    objective: object = None  # differentiable total when parameters were Variables
    clipped: int = 0  # batches whose gradient norm was clipped
    adam_steps: int = 0


def _report(ustab, recon, lam) -> LossReport:
    total = ad.add(ustab, ad.scale(recon, lam))
    return LossReport(float(ad.value_of(total)), float(ad.value_of(recon)), float(ad.value_of(ustab)),
                      objective=total)


# -- losses -------------------------------------------------------------------

def pretrain_loss(theta: DenoiserNet, t, sc: SmoothingConfig, params=None):
    """Monte-Carlo average of ``||D(t + eta) - t||^2`` over ``sc.samples`` draws."""
    eta = noise_block(sc, PRETRAIN_NOISE, 0, np.shape(t))
    d = denoise(theta, ad.add(t, eta), params)
    return ad.scale(ad.sum_squares(ad.sub(d, t)), 1.0 / sc.samples)


def ustab_loss(theta: DenoiserNet, trace: ReconTrace, t, sc: SmoothingConfig, variant="denoised_target",
               params=None, frozen: DenoiserNet | None = None):
    """Sum over ``x^0 .. x^{N-1}`` of the Monte-Carlo estimate of ``E ||D(x^n + eta) - target||^2``."""
    if variant not in USTAB_VARIANTS:
        raise ConfigError(f"unknown ustab variant {variant!r}")
    t = np.asarray(t, dtype=np.float64)
    iterates = trace.iterates[:-1]
    if trace.denoiser_outputs and len(trace.denoiser_outputs) != len(iterates):
        raise UsageError("trace has inconsistent iterate and denoiser-output counts")
    for x in trace.iterates:
        if ad.value_of(x).shape != t.shape:
            raise UsageError(f"trace iterate shape {ad.value_of(x).shape} does not match target {t.shape}")
    if variant == "frozen_denoiser" and frozen is None:
        raise UsageError("frozen_denoiser variant needs the frozen vanilla denoiser")
    if variant == "denoised_target":
        target = denoise(theta, t, params)
    elif variant == "raw_target":
        target = t
    elif variant == "frozen_denoiser":
        target = denoise(frozen, t, {k: ad.value_of(v) for k, v in frozen.params.items()})
    total = 0.0
    for n, x in enumerate(iterates):
        eta = noise_block(sc, USTAB_NOISE, n, t.shape)
        if variant == "denoised_iterate":
            target = denoise(theta, x, params)
        d = denoise(theta, ad.add(x, eta), params)
        total = ad.add(total, ad.scale(ad.sum_squares(ad.sub(d, target)), 1.0 / sc.samples))
    return total


def _ustab_sc(sc: SmoothingConfig, tc: TrainConfig) -> SmoothingConfig:
    return SmoothingConfig(sc.sigma, tc.ustab_samples, sc.seed)


def finetune_loss(theta: DenoiserNet, A: ForwardOperator, y, t, cfg: UnrollConfig, sc: SmoothingConfig,
                  tc: TrainConfig, params=None, frozen: DenoiserNet | None = None) -> LossReport:
    """``ustab + lambda_ell * ||F_SMUG(A^H y) - t||^2``; differentiable through the whole unrolling."""
    trace = smug_reconstruct(theta, A, y, cfg, sc, params)
    recon = ad.sum_squares(ad.sub(trace.final, t))
    us = ustab_loss(theta, trace, t, _ustab_sc(sc, tc), tc.ustab_variant, params, frozen)
    return _report(us, recon, tc.lambda_ell)


def wfinetune_loss(theta: DenoiserNet, phi: WeightEncoder, A: ForwardOperator, y, t, cfg: UnrollConfig,
                   sc: SmoothingConfig, tc: TrainConfig, params=None, enc_params=None,
                   frozen: DenoiserNet | None = None) -> LossReport:
    """Weighted SMUG objective; the encoder only receives gradient through the reconstruction term.

    The UStab term is evaluated on the unweighted SMUG iterates of the same
    denoiser so that it is a function of ``theta`` alone. With a constant
    encoder those iterates coincide with the weighted ones.
    """
    trace = wsmug_reconstruct(theta, phi, A, y, cfg, sc, params, enc_params)
    recon = ad.sum_squares(ad.sub(trace.final, t))
    plain = smug_reconstruct(theta, A, y, cfg, sc, params)
    us = ustab_loss(theta, plain, t, _ustab_sc(sc, tc), tc.ustab_variant, params, frozen)
    return _report(us, recon, tc.lambda_ell)


def modl_loss(theta: DenoiserNet, A: ForwardOperator, y, t, cfg: UnrollConfig, tc: TrainConfig,
              params=None) -> LossReport:
    """Plain end-to-end loss of the unsmoothed unrolled network."""
    trace = modl_reconstruct(theta, A, y, cfg, params)
    return _report(0.0, ad.sum_squares(ad.sub(trace.final, t)), tc.lambda_ell)


def rs_e2e_loss(theta: DenoiserNet, A: ForwardOperator, y, t, cfg: UnrollConfig, sc: SmoothingConfig,
                tc: TrainConfig, params=None) -> LossReport:
    """End-to-end loss of the network smoothed as a whole over k-space noise."""
    x = rs_e2e_reconstruct(theta, A, y, cfg, sc, params)
    return _report(0.0, ad.sum_squares(ad.sub(x, t)), tc.lambda_ell)


def istanet_loss(net: IstaNet, A: ForwardOperator, y, t, cfg: UnrollConfig, sc: SmoothingConfig, tc: TrainConfig,
                 mode="vanilla", encoder: WeightEncoder | None = None, params=None, enc_params=None) -> LossReport:
    """Reconstruction error plus ``ista_gamma * sum_n ||G(F(r^n)) - r^n||^2`` (reported as the ``ustab`` term)."""
    p = net.params if params is None else params
    trace = istanet_reconstruct(net, A, y, cfg, sc, mode, encoder, p, enc_params)
    recon = ad.sum_squares(ad.sub(trace.final, t))
    cons = 0.0
    for n, r in enumerate(trace.denoiser_inputs):
        r4 = ad.reshape(r, (1,) + ad.value_of(r).shape)
        back = ista_inverse(net, n, ista_transform(net, n, r4, p), p)
        cons = ad.add(cons, ad.sum_squares(ad.sub(back, r4)))
    return _report(ad.scale(cons, tc.ista_gamma), recon, tc.lambda_ell)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict, grads: dict, tc: TrainConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise UsageError("parameter, gradient and optimizer-state names differ")
    b1, b2 = tc.adam_betas
    step = state.step + 1
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[k].shape != g.shape:
            raise UsageError(f"shape mismatch for {k}: param {np.shape(p)}, grad {g.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        new_p[k] = p - tc.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step)


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, bool]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm:
        return grads, False
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, True


# -- training loops -----------------------------------------------------------

def item_seed(seed: int, epoch: int, index: int) -> int:
    """Per-(epoch, item) seed so every batch sees fresh, reproducible smoothing noise."""
    return int(np.random.SeedSequence([int(seed), int(epoch), int(index)]).generate_state(1)[0])


def _flatten(groups: dict) -> dict:
    return {f"{g}/{k}": v for g, params in groups.items() for k, v in params.items()}


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        g, k = key.split("/", 1)
        out.setdefault(g, {})[k] = v
    return out


def fit(groups: dict, n_items: int, item_loss: Callable, tc: TrainConfig, name: str = "train",
        out_dir=None, checkpoint: Callable | None = None, record_timing=True) -> tuple[dict, LossReport]:
    """Generic epoch loop.

    ``groups`` maps a group name to its parameter dict. ``item_loss(params, index, seed)``
    gets the same structure with tape Variables and returns a :class:`LossReport`.
    ``checkpoint(groups, epoch)`` builds the :class:`Checkpoint` written after each
    epoch when ``out_dir`` is given.
    """
    if n_items == 0:
        raise ConfigError(f"{name}: dataset is empty")
    flat = {k: np.array(v, dtype=np.float64) for k, v in _flatten(groups).items()}
    state = AdamState.zeros(flat)
    report = LossReport(float("nan"), float("nan"), float("nan"))
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, 7, epoch]).permutation(n_items)
        sums = np.zeros(3)
        for b0 in range(0, n_items, tc.batch_size):
            batch = order[b0:b0 + tc.batch_size]
            acc = {k: np.zeros_like(v) for k, v in flat.items()}
            for idx in batch:
                tape = ad.Tape()
                leaves = {k: tape.leaf(v) for k, v in flat.items()}
                rep = item_loss(_unflatten(leaves), int(idx), item_seed(tc.seed, epoch, int(idx)))
                sums += (rep.total, rep.recon, rep.ustab)
                if isinstance(rep.objective, ad.Variable):
                    g = ad.backward(rep.objective)
                    for k, leaf in leaves.items():
                        acc[k] += g[leaf]
            grads = {k: a / len(batch) for k, a in acc.items()}
            grads, clipped = clip_gradients(grads, tc.clip_norm)
            report.clipped += int(clipped)
            flat, state = adam_step(state, flat, grads, tc)
        total, recon, ustab = sums / n_items
        wall = time.perf_counter() - t0 if record_timing else 0.0
        report.history.append({"epoch": epoch, "total": float(total), "recon": float(recon),
                               "ustab": float(ustab), "wall_seconds": float(wall)})
        report.total, report.recon, report.ustab = float(total), float(recon), float(ustab)
        log.info("%s epoch %d: total %.6g recon %.6g ustab %.6g (%.1fs)", name, epoch, total, recon, ustab, wall)
        if out is not None:
            write_csv(out / f"{name}_train.csv", TRAIN_CSV_FIELDS, report.history)
            if checkpoint is not None:
                save_checkpoint(out / f"{name}_epoch{epoch:03d}.ckpt", checkpoint(_unflatten(flat), epoch))
    report.adam_steps = state.step
    return _unflatten(flat), report


def _meta(tc: TrainConfig, name: str, epoch: int, extra=None) -> dict:
    d = {"stage": name, "epoch": epoch, "train_config": asdict(tc)}
    d["train_config"]["adam_betas"] = list(tc.adam_betas)
    if extra:
        d.update(extra)
    return d


def pretrain(dataset, tc: TrainConfig, theta: DenoiserNet, out_dir=None, name="pretrain",
             record_timing=True, meta=None) -> tuple[DenoiserNet, LossReport]:
    """Denoising pre-training at noise level ``tc.pretrain_noise`` starting from ``theta``."""
    ts = [np.asarray(t, dtype=np.float64) for t in dataset]
    sigma = tc.pretrain_noise
    n_samples = tc.pretrain_samples if sigma > 0 else 1

    def item_loss(p, i, seed):
        obj = pretrain_loss(theta, ts[i], SmoothingConfig(sigma, n_samples, seed), p["denoiser"])
        return _report(0.0, obj, 1.0)  # the denoising loss fills the recon column

    def ckpt(groups, epoch):
        return Checkpoint(DenoiserNet(theta.spec, groups["denoiser"]), meta=_meta(tc, name, epoch, meta))

    groups, report = fit({"denoiser": theta.params}, len(ts), item_loss, tc, name, out_dir, ckpt, record_timing)
    return DenoiserNet(theta.spec, groups["denoiser"]), report


@dataclass
class FinetuneResult:
    denoiser: DenoiserNet | None
    encoder: WeightEncoder | None
    report: LossReport
    istanet: IstaNet | None = None


def finetune(dataset, theta_pre: DenoiserNet | None, A: ForwardOperator, cfg: UnrollConfig, tc: TrainConfig,
             mode="smug", encoder: WeightEncoder | None = None, frozen: DenoiserNet | None = None,
             out_dir=None, name=None, record_timing=True, meta=None) -> FinetuneResult:
    """Fine-tune from ``theta_pre`` on ``(y, t)`` pairs.

    ``mode`` is ``modl`` (end-to-end loss only), ``rs_e2e`` (end-to-end loss
    of the whole-network smoothed model), ``smug`` or ``wsmug``; the
    latter trains a weighting encoder jointly (a fresh one with a zero head
    if none is given, which starts out equal to SMUG).
    """
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"unknown fine-tune mode {mode!r}; choose from {FINETUNE_MODES}")
    if theta_pre is None:
        raise ConfigError("fine-tuning needs a pre-trained denoiser")
    pairs = [(np.asarray(y, dtype=np.float64), np.asarray(t, dtype=np.float64)) for y, t in dataset]
    name = name or f"finetune_{mode}"
    groups = {"denoiser": theta_pre.params}
    if mode == "wsmug":
        encoder = encoder or init_encoder(EncoderSpec(), tc.seed)
        groups["encoder"] = encoder.params

    def item_loss(p, i, seed):
        y, t = pairs[i]
        sc = SmoothingConfig(tc.sigma, tc.samples, seed)
        if mode == "modl":
            return modl_loss(theta_pre, A, y, t, cfg, tc, p["denoiser"])
        if mode == "rs_e2e":
            return rs_e2e_loss(theta_pre, A, y, t, cfg, sc, tc, p["denoiser"])
        if mode == "smug":
            return finetune_loss(theta_pre, A, y, t, cfg, sc, tc, p["denoiser"], frozen)
        return wfinetune_loss(theta_pre, encoder, A, y, t, cfg, sc, tc, p["denoiser"], p["encoder"], frozen)

    def ckpt(g, epoch):
        enc = WeightEncoder(encoder.spec, g["encoder"]) if "encoder" in g else None
        return Checkpoint(DenoiserNet(theta_pre.spec, g["denoiser"]), enc, meta=_meta(tc, name, epoch, meta))

    out, report = fit(groups, len(pairs), item_loss, tc, name, out_dir, ckpt, record_timing)
    enc = WeightEncoder(encoder.spec, out["encoder"]) if mode == "wsmug" else None
    return FinetuneResult(DenoiserNet(theta_pre.spec, out["denoiser"]), enc, report)


def train_istanet(dataset, net: IstaNet, A: ForwardOperator, cfg: UnrollConfig, tc: TrainConfig, mode="vanilla",
                  encoder: WeightEncoder | None = None, out_dir=None, name=None, record_timing=True,
                  meta=None) -> FinetuneResult:
    """End-to-end ISTA-Net training with the transform-inverse constraint; ``wsmug`` also trains an encoder."""
    pairs = [(np.asarray(y, dtype=np.float64), np.asarray(t, dtype=np.float64)) for y, t in dataset]
    name = name or f"istanet_{mode}"
    groups = {"istanet": net.params}
    if mode == "wsmug":
        encoder = encoder or init_encoder(EncoderSpec(), tc.seed)
        groups["encoder"] = encoder.params

    def item_loss(p, i, seed):
        y, t = pairs[i]
        sc = SmoothingConfig(tc.sigma, tc.samples, seed)
        return istanet_loss(net, A, y, t, cfg, sc, tc, mode, encoder, p["istanet"], p.get("encoder"))

    def ckpt(g, epoch):
        enc = WeightEncoder(encoder.spec, g["encoder"]) if "encoder" in g else None
        return Checkpoint(None, enc, IstaNet(net.spec, g["istanet"]), meta=_meta(tc, name, epoch, meta))

    out, report = fit(groups, len(pairs), item_loss, tc, name, out_dir, ckpt, record_timing)
    enc = WeightEncoder(encoder.spec, out["encoder"]) if mode == "wsmug" else None
    return FinetuneResult(None, enc, report, IstaNet(net.spec, out["istanet"]))
