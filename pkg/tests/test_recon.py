import numpy as np
import pytest

from smug import autodiff as ad
from smug.errors import ConfigError
from smug.fourier import ForwardOperator, SamplingMask, make_vd_mask
from smug.models import (DenoiserNet, DenoiserSpec, EncoderSpec, IstaSpec, denoise, init_denoiser, init_encoder,
                         init_istanet, ista_inverse, ista_transform)
from smug.recon import (IMAGE_NOISE, Reconstructor, SmoothingConfig, UnrollConfig, _weighted_mean, dc_step,
                        istanet_reconstruct, modl_reconstruct, noise, noise_block, rs_e2e_reconstruct,
                        smooth_denoise, smug_reconstruct, weighted_smooth, wsmug_reconstruct)

SPEC = DenoiserSpec(channels=(2, 8, 2))


def problem(seed, h=8, accel=2, cf=0.2):
    rng = np.random.default_rng(seed)
    A = ForwardOperator(make_vd_mask(h, h, accel, cf, seed))
    t = rng.standard_normal((2, h, h)) * 0.5
    return A, A.forward(t), t


def dense_dc(A, y, z, lam):
    M = A.dense_matrix()
    n = M.shape[0]
    return np.linalg.solve(M.T @ M + lam * np.eye(n), M.T @ y.ravel() + lam * z.ravel()).reshape(z.shape)


def test_dc_step_full_and_dense():
    rng = np.random.default_rng(0)
    full = ForwardOperator(SamplingMask.full(8, 8))
    y, z = rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))
    assert np.allclose(dc_step(full, y, z, UnrollConfig(cg_tol=1e-12)), (full.adjoint(y) + z) / 2, atol=1e-10)
    A, y, _ = problem(1)
    cfg = UnrollConfig(lam=0.5, cg_tol=1e-12)
    assert np.allclose(dc_step(A, y, z, cfg), dense_dc(A, y, z, 0.5), atol=1e-8)


def test_dc_step_small_lambda_approaches_least_squares():
    A, y, _ = problem(2)
    x = dc_step(A, y, np.zeros((2, 8, 8)), UnrollConfig(lam=1e-6, cg_tol=1e-12))
    assert np.allclose(x, A.adjoint(y), atol=1e-5)
    assert np.allclose(dense_dc(A, y, np.zeros((2, 8, 8)), 1e-6), x, atol=1e-8)


def test_modl_trace_contract_and_zero_denoiser():
    A, y, _ = problem(3)
    theta = init_denoiser(SPEC, 0)
    tr = modl_reconstruct(theta, A, y, UnrollConfig(n_steps=3))
    assert len(tr.iterates) == 4 and tr.iterates[0].tobytes() == A.adjoint(y).tobytes()
    assert len(tr.cg_residuals) == 3 and tr.cg_converged
    zero = DenoiserNet(SPEC, {k: np.zeros_like(v) for k, v in theta.params.items()})
    cfg = UnrollConfig(n_steps=1)
    assert np.array_equal(modl_reconstruct(zero, A, y, cfg).final, dc_step(A, y, np.zeros((2, 8, 8)), cfg))
    rows = tr.rows()
    assert [r["step"] for r in rows] == [0, 1, 2, 3] and rows[0]["cg_residual"] == 0.0


def test_dc_fixed_point():
    # x* with A x* = y and D(x*) = x*: with zero denoiser, x* = 0 and y = 0
    A, _, _ = problem(4)
    zero = DenoiserNet(SPEC, {k: np.zeros_like(v) for k, v in init_denoiser(SPEC, 0).params.items()})
    x = modl_reconstruct(zero, A, np.zeros((2, 8, 8)), UnrollConfig(n_steps=1)).final
    assert np.all(x == 0)


def test_smooth_denoise_degenerate_cases():
    theta = init_denoiser(SPEC, 1)
    x = np.random.default_rng(5).standard_normal((2, 8, 8))
    assert np.array_equal(smooth_denoise(theta, x, SmoothingConfig(0.0, 1, 0)), denoise(theta, x))
    sc = SmoothingConfig(0.1, 1, 9)
    single = denoise(theta, x + noise(9, IMAGE_NOISE, 0, 0, x.shape, 0.1))
    assert np.allclose(smooth_denoise(theta, x, sc), single, atol=1e-15)


def test_smooth_denoise_variance_scales_inverse_T():
    theta = init_denoiser(SPEC, 2)
    x = np.random.default_rng(6).standard_normal((2, 8, 8))

    def spread(T):
        outs = np.stack([smooth_denoise(theta, x, SmoothingConfig(0.3, T, s)) for s in range(200)])
        return outs.var(axis=0).mean()

    ratio = spread(4) / spread(16)
    assert 4 * 0.7 < ratio < 4 * 1.3


def test_noise_is_counter_based():
    blk = noise_block(SmoothingConfig(0.2, 3, 11), IMAGE_NOISE, 4, (2, 4, 4))
    assert np.array_equal(blk[2], noise(11, IMAGE_NOISE, 4, 2, (2, 4, 4), 0.2))


def test_smug_degenerates_to_modl():
    theta = init_denoiser(SPEC, 3)
    for seed in range(5):
        A, y, _ = problem(seed)
        cfg = UnrollConfig(n_steps=4)
        a = smug_reconstruct(theta, A, y, cfg, SmoothingConfig(0.0, 1, seed)).final
        b = modl_reconstruct(theta, A, y, cfg).final
        assert np.max(np.abs(a - b)) <= 1e-12


def test_smug_zero_steps_and_determinism():
    theta = init_denoiser(SPEC, 4)
    A, y, _ = problem(7)
    tr = smug_reconstruct(theta, A, y, UnrollConfig(n_steps=0), SmoothingConfig(0.1, 2, 0))
    assert len(tr.iterates) == 1 and np.array_equal(tr.final, A.adjoint(y))
    cfg = UnrollConfig(n_steps=3)
    a = smug_reconstruct(theta, A, y, cfg, SmoothingConfig(0.1, 2, 5)).final
    b = smug_reconstruct(theta, A, y, cfg, SmoothingConfig(0.1, 2, 5)).final
    c = smug_reconstruct(theta, A, y, cfg, SmoothingConfig(0.1, 2, 6)).final
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)


def test_weighted_smooth_cases():
    theta = init_denoiser(SPEC, 5)
    x = np.random.default_rng(8).standard_normal((2, 8, 8))
    flat = init_encoder(EncoderSpec(), 0)
    sc = SmoothingConfig(0.2, 4, 3)
    assert np.max(np.abs(weighted_smooth(theta, flat, x, sc) - smooth_denoise(theta, x, sc))) <= 1e-12
    rnd = init_encoder(EncoderSpec(), 1, zero_head=False)
    sc1 = SmoothingConfig(0.2, 1, 3)
    assert np.allclose(weighted_smooth(theta, rnd, x, sc1), smooth_denoise(theta, x, sc1), atol=1e-14)


def test_weighted_mean_two_term_hand_check():
    u, v = np.full((2, 2, 2), 1.0), np.full((2, 2, 2), 3.0)
    out = _weighted_mean(np.stack([u, v]), np.array([0.25, 0.75]))
    assert np.allclose(out, 0.25 * u + 0.75 * v)


def test_wsmug_degeneracies():
    theta = init_denoiser(SPEC, 6)
    A, y, _ = problem(9)
    cfg = UnrollConfig(n_steps=3)
    sc = SmoothingConfig(0.1, 3, 2)
    flat = init_encoder(EncoderSpec(), 3)
    a = wsmug_reconstruct(theta, flat, A, y, cfg, sc).final
    assert np.max(np.abs(a - smug_reconstruct(theta, A, y, cfg, sc).final)) <= 1e-12
    rnd = init_encoder(EncoderSpec(), 4, zero_head=False)
    b = wsmug_reconstruct(theta, rnd, A, y, cfg, SmoothingConfig(0.0, 1, 0)).final
    assert np.max(np.abs(b - modl_reconstruct(theta, A, y, cfg).final)) <= 1e-12
    again = wsmug_reconstruct(theta, rnd, A, y, cfg, sc).final
    assert again.tobytes() == wsmug_reconstruct(theta, rnd, A, y, cfg, sc).final.tobytes()


def test_rs_e2e_cases():
    theta = init_denoiser(SPEC, 7)
    A, y, _ = problem(10)
    cfg = UnrollConfig(n_steps=2)
    assert np.allclose(rs_e2e_reconstruct(theta, A, y, cfg, SmoothingConfig(0.0, 3, 0)),
                       modl_reconstruct(theta, A, y, cfg).final, atol=1e-12)
    sc = SmoothingConfig(0.1, 2, 4)
    runs = [modl_reconstruct(theta, A, y + noise(4, 2, 0, t, y.shape, 0.1) * A.mask.keep, cfg).final for t in range(2)]
    assert np.allclose(rs_e2e_reconstruct(theta, A, y, cfg, sc), (runs[0] + runs[1]) / 2, atol=1e-12)


def test_rs_e2e_linear_pipeline_mean():
    zero = DenoiserNet(SPEC, {k: np.zeros_like(v) for k, v in init_denoiser(SPEC, 0).params.items()})
    A, y, _ = problem(11)
    cfg = UnrollConfig(n_steps=2)
    T = 400
    clean = modl_reconstruct(zero, A, y, cfg).final
    samples = np.stack([rs_e2e_reconstruct(zero, A, y, cfg, SmoothingConfig(0.2, 1, s)) for s in range(T)])
    se = samples.std(axis=0) / np.sqrt(T)
    assert np.all(np.abs(samples.mean(axis=0) - clean) <= 3 * se + 1e-12) or \
        np.mean(np.abs(samples.mean(axis=0) - clean) <= 3 * se + 1e-12) > 0.98


def test_istanet_cases():
    A, y, _ = problem(12)
    net = init_istanet(IstaSpec(phases=3), 0)
    cfg = UnrollConfig(n_steps=3)
    a = istanet_reconstruct(net, A, y, cfg, SmoothingConfig(0.0, 1, 0), "smug").final
    b = istanet_reconstruct(net, A, y, cfg, SmoothingConfig(0.0, 1, 0), "vanilla").final
    assert np.max(np.abs(a - b)) <= 1e-12
    ident = init_istanet(IstaSpec(phases=3), 0, step=0.0, threshold=0.0, jitter=0.0)
    tr = istanet_reconstruct(ident, A, y, cfg, SmoothingConfig(), "vanilla")
    assert all(np.allclose(x, tr.iterates[0], atol=1e-12) for x in tr.iterates)
    assert len(tr.denoiser_inputs) == 3
    with pytest.raises(ConfigError):
        istanet_reconstruct(net, A, y, UnrollConfig(n_steps=4), SmoothingConfig())
    with pytest.raises(ConfigError):
        istanet_reconstruct(net, A, y, cfg, SmoothingConfig(), "wsmug")


def test_istanet_transform_constraint_surrogate():
    net = init_istanet(IstaSpec(phases=2), 3)
    r = np.random.default_rng(13).standard_normal((1, 2, 8, 8))
    back = ista_inverse(net, 1, ista_transform(net, 1, r))
    assert np.linalg.norm(back - r) / np.linalg.norm(r) < 0.1


def test_reconstructor_dispatch_and_validation():
    A, y, _ = problem(14)
    theta = init_denoiser(SPEC, 8)
    cfg, sc = UnrollConfig(n_steps=2), SmoothingConfig(0.05, 2, 1)
    r = Reconstructor("smug", A, cfg, sc, denoiser=theta)
    assert r.smoothed and np.array_equal(r(y), smug_reconstruct(theta, A, y, cfg, sc).final)
    assert not Reconstructor("modl", A, cfg, sc, denoiser=theta).smoothed
    rs = Reconstructor("rs_e2e", A, cfg, sc, denoiser=theta).trace(y)
    assert len(rs.iterates) == 2
    with pytest.raises(ConfigError):
        Reconstructor("wsmug", A, cfg, sc, denoiser=theta)
    with pytest.raises(ConfigError):
        Reconstructor("istanet", A, cfg, sc)
    with pytest.raises(ConfigError):
        Reconstructor("nope", A, cfg, sc, denoiser=theta)
    with pytest.raises(ConfigError):
        UnrollConfig(lam=0)
    with pytest.raises(ConfigError):
        SmoothingConfig(samples=0)


def test_pipeline_gradient_wrt_measurements_fd():
    theta = init_denoiser(SPEC, 9)
    A, y, t = problem(15)
    r = Reconstructor("smug", A, UnrollConfig(n_steps=2), SmoothingConfig(0.05, 2, 3), denoiser=theta)

    def f(d):
        return ad.sum_squares(ad.sub(r(ad.add(y, d)), t))

    coords = [int(i) for i in np.flatnonzero(np.broadcast_to(A.mask.keep, y.shape))[::5]]
    rep = ad.grad_check(f, np.zeros_like(y), coords=coords)
    assert rep.max_rel_err < 1e-4
