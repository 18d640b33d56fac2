"""Acceptance suite: one test (and one printed PASS/FAIL line) per criterion.

Criteria 5 and 7 to 11 share a single trained run built from
``configs/acceptance.ini`` (64x64 phantoms, 4x mask, 8 unrolled steps,
sigma 0.05, T 4). Run with ``pytest tests/test_acceptance.py -v``; the
verdict lines appear in the "acceptance criteria" section of the summary.
"""
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from smug import autodiff as ad
from smug.config import ExperimentConfig
from smug.data import PhantomSpec, generate_phantoms
from smug.fourier import ForwardOperator, SamplingMask, make_vd_mask
from smug.linalg import alpha_constant, operator_norm
from smug.metrics import METRICS_COLUMNS
from smug.models import DenoiserSpec, EncoderSpec, IstaSpec, init_denoiser, init_encoder, init_istanet
from smug.pipeline import Run
from smug.recon import (SmoothingConfig, UnrollConfig, dc_step, istanet_reconstruct, modl_reconstruct,
                        smug_reconstruct, wsmug_reconstruct)
from smug.records import read_csv
from smug.robustness import lemma1_check, sweep
from smug.training import TrainConfig, finetune_loss

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini"
METHODS = ("modl", "smug", "wsmug")


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


# -- shared trained run ---------------------------------------------------------------

def build_pipeline(cfg: ExperimentConfig, root: Path) -> tuple[Run, float]:
    """gen-data, pre-training, three fine-tunes and the test-set evaluation; returns the wall time."""
    run = Run(cfg, root)
    t0 = time.perf_counter()
    with run.command("gen-data"):
        run.gen_data()
    for m in METHODS:
        with run.command(f"finetune_{m}"):
            run.finetune(m)
    with run.command("eval"):
        run.evaluate(METHODS)
    return run, time.perf_counter() - t0


@pytest.fixture(scope="session")
def accept(tmp_path_factory):
    cfg = ExperimentConfig.load(CONFIG)
    run, wall = build_pipeline(cfg, tmp_path_factory.mktemp("acceptance") / "run")
    return {"cfg": cfg, "run": run, "wall": wall, "tmp": tmp_path_factory}


def eval_rows(path) -> dict:
    return {r["method"]: r for r in read_csv(path)}


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_01_dc_step_matches_dense_solve():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(50):
        A = ForwardOperator(make_vd_mask(8, 8, float(rng.choice([2, 4])), 0.2, k))
        y = A.forward(rng.standard_normal((2, 8, 8)))
        z = rng.standard_normal((2, 8, 8))
        lam = float(rng.uniform(0.1, 5.0))
        M = A.dense_matrix()
        ref = np.linalg.solve(M.T @ M + lam * np.eye(128), M.T @ y.ravel() + lam * z.ravel())
        got = dc_step(A, y, z, UnrollConfig(lam=lam, cg_tol=1e-12)).ravel()
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    wall = time.perf_counter() - t0
    ok = worst < 1e-8 and wall < 10
    record_criterion(1, "DC step vs dense solve", ok, f"max rel err {worst:.2e} over 50 cases, {wall:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_02_finetune_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    net = init_denoiser(DenoiserSpec(channels=(2, 8, 2)), 3)
    # zero biases put every pre-activation of a flat zero region exactly on the relu kink
    rng = np.random.default_rng(0)
    params = {k: v + 0.05 * rng.standard_normal(v.shape) if k.endswith(".b") else v for k, v in net.params.items()}
    t = generate_phantoms(PhantomSpec(size=8, seed=2), 1)[0]
    A = ForwardOperator(make_vd_mask(8, 8, 2, 0.2, 0))
    y = A.forward(t)
    cfg = UnrollConfig(n_steps=8, cg_tol=1e-13)
    sc, tc = SmoothingConfig(0.05, 4, 7), TrainConfig()
    worst, checked, skipped, every_tensor = 0.0, 0, 0, True
    for name, p in params.items():

        def f(v, name=name):
            return finetune_loss(net, A, y, t, cfg, sc, tc, {**params, name: v}).objective

        r = ad.grad_check(f, p, skip_kinks=True)
        worst = max(worst, r.max_rel_err)
        checked, skipped = checked + r.n_checked, skipped + r.n_skipped
        every_tensor &= r.n_checked > 0
    wall = time.perf_counter() - t0
    ok = worst < 1e-4 and wall < 60 and every_tensor and checked >= skipped
    record_criterion(2, "fine-tune gradient vs finite differences", ok,
                     f"max rel err {worst:.2e} over {checked} params ({skipped} skipped at relu kinks), {wall:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_03_degeneracy_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    spec = DenoiserSpec(channels=(2, 8, 2))
    worst_modl = worst_w = 0.0
    for k in range(20):
        A = ForwardOperator(make_vd_mask(8, 8, 2, 0.2, k))
        y = A.forward(rng.standard_normal((2, 8, 8)))
        theta = init_denoiser(spec, k)
        cfg = UnrollConfig(n_steps=int(rng.integers(1, 9)))
        a = smug_reconstruct(theta, A, y, cfg, SmoothingConfig(0.0, 1, k)).final
        worst_modl = max(worst_modl, np.max(np.abs(a - modl_reconstruct(theta, A, y, cfg).final)))
        sc = SmoothingConfig(float(rng.uniform(0.01, 0.2)), int(rng.integers(1, 5)), k)
        w = wsmug_reconstruct(theta, init_encoder(EncoderSpec(), k), A, y, cfg, sc).final
        worst_w = max(worst_w, np.max(np.abs(w - smug_reconstruct(theta, A, y, cfg, sc).final)))
    A = ForwardOperator(make_vd_mask(8, 8, 2, 0.2, 0))
    y = A.forward(rng.standard_normal((2, 8, 8)))
    net = init_istanet(IstaSpec(phases=4), 0)
    cfg = UnrollConfig(n_steps=4)
    worst_i = np.max(np.abs(istanet_reconstruct(net, A, y, cfg, SmoothingConfig(0.0, 1, 0), "smug").final
                            - istanet_reconstruct(net, A, y, cfg, SmoothingConfig(0.0, 1, 0), "vanilla").final))
    wall = time.perf_counter() - t0
    ok = worst_modl <= 1e-12 and worst_w <= 1e-12 and worst_i <= 1e-12 and wall < 30
    record_criterion(3, "degeneracy identities", ok,
                     f"smug-modl {worst_modl:.1e}, wsmug-smug {worst_w:.1e}, ista smug-vanilla {worst_i:.1e}, "
                     f"{wall:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_04_operator_constants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    errs = []
    for k in range(20):
        n = int(rng.choice([8, 16, 32]))
        if k % 2:
            A = ForwardOperator(make_vd_mask(n, n, float(rng.choice([2, 4, 8])), 0.5 / 8, k))
        else:  # arbitrary nonempty pixel pattern that is not fully sampled
            keep = rng.random((n, n)) < rng.uniform(0.05, 0.9)
            keep[0, 0], keep[-1, -1] = True, False
            A = ForwardOperator(SamplingMask(keep))
        errs.append(max(abs(operator_norm(A).value - 1), abs(alpha_constant(A, 1.0).value - 1)))
    full = abs(alpha_constant(ForwardOperator(SamplingMask.full(16, 16)), 1.0).value - 0.5)
    wall = time.perf_counter() - t0
    ok = max(errs) <= 1e-6 and full <= 1e-6 and wall < 10
    record_criterion(4, "operator constants", ok,
                     f"max |norm-1|,|alpha-1| {max(errs):.1e} over 20 masks, full-sampling alpha err {full:.1e}, "
                     f"{wall:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_05_certificate_audit_and_sigma_trend(accept):
    run = accept["run"]
    with run.command("bound-check"):
        path = run.bound_check(n_items=2, n_random=100)
    rep = json.loads(path.read_text())
    audit_ok = rep["holds"] and [r["n"] for r in rep["reports"]] == list(range(1, 9))
    n_cases = len(rep["reports"][0]["errors"])
    worst_ratio = max(e / (r["C_n"] * d) for r in rep["reports"] for e, d in zip(r["errors"], r["delta_norms"]))
    grid = [0.005, 0.01, 0.02, 0.05]
    with run.command("sweep_sigma"):
        p = run.sweep("sigma", grid, ("smug",))
    errs = [float(r["rob_error_mean"]) for r in read_csv(p)]
    trend_ok = all(b <= 1.05 * a for a, b in zip(errs, errs[1:]))
    ok = audit_ok and trend_ok
    record_criterion(5, "certificate audit and sigma trend", ok,
                     f"bound holds for n=1..8 on {n_cases} deltas per n (max err/(C_n|d|) {worst_ratio:.1e}); "
                     f"rob. error over sigma {grid}: {_fmt(errs)}")
    assert audit_ok, "robustness error exceeded the certificate"
    assert trend_ok, f"robustness error not non-increasing in sigma: {errs}"


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_06_lipschitz_lemma():
    t0 = time.perf_counter()
    # 4e6 denoiser evaluations must fit in 5 minutes, so a small bounded net with active relus stands in
    net = init_denoiser(DenoiserSpec(channels=(2, 8, 2)), 6)
    rng = np.random.default_rng(6)
    net.params = {k: v + 0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else v for k, v in net.params.items()}
    ts = generate_phantoms(PhantomSpec(size=64, seed=6), 10)
    reports = []
    for sigma in (0.05, 0.1):
        for k in range(10):
            i, r0, c0 = int(rng.integers(len(ts))), *rng.integers(0, 56, 2)
            x = ts[i][:, r0:r0 + 8, c0:c0 + 8]
            d = rng.standard_normal(x.shape)
            d *= float(rng.uniform(0.01, 0.2)) / np.linalg.norm(d)
            reports.append(lemma1_check(net, sigma, x, d, T_large=100_000, seed=k))
    wall = time.perf_counter() - t0
    ok = all(r.holds for r in reports) and wall < 300
    tight = max(r.diff_norm / r.bound for r in reports)
    record_criterion(6, "Lipschitz lemma", ok,
                     f"{sum(r.holds for r in reports)}/20 pairs hold at T=1e5, max measured/bound {tight:.2e}, "
                     f"{wall:.0f}s")
    assert ok


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_07_directional_robustness(accept):
    rows = eval_rows(accept["run"].results_dir / "eval.csv")
    rp = {m: float(rows[m]["robust_psnr"]) for m in METHODS}
    cp = {m: float(rows[m]["clean_psnr"]) for m in METHODS}
    checks = {
        "robust smug >= modl + 1": rp["smug"] >= rp["modl"] + 1.0,
        "clean smug >= modl - 1": cp["smug"] >= cp["modl"] - 1.0,
        "robust wsmug >= smug - 0.2": rp["wsmug"] >= rp["smug"] - 0.2,
        "wall < 30 min": accept["wall"] < 1800,
    }
    ok = all(checks.values())
    detail = (f"robust PSNR modl/smug/wsmug {rp['modl']:.2f}/{rp['smug']:.2f}/{rp['wsmug']:.2f}, clean "
              f"{cp['modl']:.2f}/{cp['smug']:.2f}/{cp['wsmug']:.2f}, pipeline {accept['wall'] / 60:.1f} min")
    failed = [k for k, v in checks.items() if not v]
    record_criterion(7, "directional robustness", ok, detail + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_08_unroll_depth_stability(accept):
    run = accept["run"]
    t0 = time.perf_counter()
    grid = [4, 8, 12, 16]
    with run.command("sweep_unroll_steps"):
        p = run.sweep("unroll_steps", grid, ("modl", "smug"))
    wall = time.perf_counter() - t0
    rows = read_csv(p)
    rp = {m: [float(r["robust_psnr"]) for r in rows if r["method"] == m] for m in ("modl", "smug")}
    spread = {m: max(v) - min(v) for m, v in rp.items()}
    ok = spread["smug"] < spread["modl"] and wall < 900
    record_criterion(8, "unroll-depth stability", ok,
                     f"robust PSNR over N={grid}: modl {_fmt(rp['modl'])} (spread {spread['modl']:.2f}), "
                     f"smug {_fmt(rp['smug'])} (spread {spread['smug']:.2f}), {wall / 60:.1f} min")
    assert ok


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_09_sampling_rate_sweep(accept):
    run = accept["run"]
    t0 = time.perf_counter()
    grid = [2, 4, 8]
    with run.command("sweep_accel"):
        p = run.sweep("accel", grid, METHODS)
    wall = time.perf_counter() - t0
    header = p.read_text().splitlines()[0].split(",")
    rows = read_csv(p)
    cp = {m: [float(r["clean_psnr"]) for r in rows if r["method"] == m] for m in METHODS}
    peaks = {m: grid[int(np.argmax(v))] for m, v in cp.items()}
    checks = {
        "schema": tuple(header[:len(METRICS_COLUMNS)]) == METRICS_COLUMNS and len(rows) == 9,
        "all peak at 4x": all(v == 4 for v in peaks.values()),
        "smug clean >= modl at 8x": cp["smug"][2] >= cp["modl"][2],
        "wall < 15 min": wall < 900,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(9, "sampling-rate sweep", ok,
                     "clean PSNR at " + "/".join(f"{g}x" for g in grid) + ": "
                     + ", ".join(f"{m} {_fmt(v)}" for m, v in cp.items()) + f", {wall / 60:.1f} min"
                     + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# -- 10 -----------------------------------------------------------------------------------

def test_criterion_10_monte_carlo_tradeoff(accept):
    run = accept["run"]
    t0 = time.perf_counter()
    grid = [1, 2, 4, 8, 16]
    ctx = replace(run.eval_context(8), record_timing=True)
    rows = sweep("mc_samples", grid, {"smug": run.reconstructor("smug")}, ctx)
    wall = time.perf_counter() - t0
    secs = np.array([r.wall_seconds for r in rows])
    rp = [r.robust_psnr for r in rows]
    slope, icept = np.polyfit(grid, secs, 1)
    r2 = 1 - np.sum((secs - (slope * np.array(grid) + icept)) ** 2) / np.sum((secs - secs.mean()) ** 2)
    sat = abs(rp[4] - rp[3])
    ok = r2 > 0.95 and sat < 0.3 and wall < 900
    record_criterion(10, "Monte-Carlo trade-off", ok,
                     f"eval seconds over T={grid}: {_fmt(secs)} (R^2 {r2:.4f}); robust PSNR {_fmt(rp)}, "
                     f"|T8-T16| {sat:.2f} dB, {wall / 60:.1f} min")
    assert ok


# -- 11 -----------------------------------------------------------------------------------

def test_criterion_11_determinism(accept):
    first = accept["run"].root
    second, _ = build_pipeline(accept["cfg"], accept["tmp"].mktemp("repeat") / "run")
    files = sorted(p.relative_to(first) for p in first.rglob("*")
                   if p.is_file() and (p.suffix in (".ckpt", ".npy") or p.name in ("eval.csv", "train.csv")
                                       or p.parent.name == "data"))
    compared = [f for f in files if (second.root / f).exists()]
    differing = [str(f) for f in compared if (first / f).read_bytes() != (second.root / f).read_bytes()]
    eval_same = (first / "results" / "eval.csv").read_bytes() == (second.root / "results" / "eval.csv").read_bytes()
    n_ckpt = sum(f.suffix == ".ckpt" for f in compared)
    ok = not differing and eval_same and len(compared) == len(files) and n_ckpt > 0
    record_criterion(11, "determinism", ok,
                     f"{len(compared)} files compared ({n_ckpt} checkpoints), {len(differing)} differ")
    assert ok, differing[:5]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
