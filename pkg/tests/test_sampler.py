import numpy as np
import pytest

from harrisdiff import rng as rngmod
from harrisdiff.errors import DomainError, SamplerFault
from harrisdiff.io import read_samples, write_samples
from harrisdiff.sampler import (
    BLOCK, ExplicitInit, PerturbationSpec, SamplerConfig, contraction_ratios, em_step,
    gaussian_backward_kernel, init_shift, kernel_vs_em, run_chain,
)
from harrisdiff.schedule import Schedule, make_grid
from harrisdiff.target import GaussianTarget, GmmTarget

VE, VP = Schedule.ve_linear(), Schedule.vp_linear()
G2 = GaussianTarget([1.0, -0.5], [[0.3, 0.1], [0.1, 0.2]])


def gmm2():
    return GmmTarget([0.3, 0.7], [[1.0, 1.0], [-1.0, 0.5]], [np.eye(2) * 0.5, np.eye(2) * 0.2])


def cfg_for(target, sched=VE, n_steps=50, **kw):
    return SamplerConfig(sched, make_grid(sched, n_steps), target, **kw)


@pytest.mark.parametrize("sched", [VE, VP], ids=["ve", "vp"])
def test_em_step_mean_formula(sched):
    cfg = cfg_for(G2, sched)
    x = np.array([[0.4, 2.0], [-1.0, 0.3]])
    k = 7
    t = cfg.grid.forward_times[k]
    delta = cfg.grid.deltas[k]
    fm = sched.forward_moments(t)
    cov_t = fm.m**2 * G2.cov + fm.var * np.eye(2)
    expect = x + delta * (sched.alpha * x - 2 * (x - fm.m * G2.mean) @ np.linalg.inv(cov_t))
    got = em_step(x, k, cfg, noise=np.zeros_like(x))
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_em_step_noise_scale():
    cfg = cfg_for(gmm2())
    x = np.zeros((1, 2))
    k = 3
    a = em_step(x, k, cfg, noise=np.zeros((1, 2)))
    b = em_step(x, k, cfg, noise=np.ones((1, 2)))
    np.testing.assert_allclose(b - a, np.sqrt(2 * cfg.grid.deltas[k]), rtol=1e-12)
    with pytest.raises(DomainError):
        em_step(x, cfg.grid.n_steps, cfg)


@pytest.mark.parametrize("target", [G2, gmm2()], ids=["gauss", "gmm"])
def test_zero_magnitude_perturbation_is_noop(target):
    base = run_chain(cfg_for(target, seed=3), 300)
    u = np.array([0.6, 0.8])
    for mode, at in (("score-step", 10), ("score-step", 49)):
        p = PerturbationSpec(mode, u, 0.0, at)
        assert np.array_equal(run_chain(cfg_for(target, seed=3, perturbation=p), 300), base)


def test_score_perturbation_shifts_output():
    u = np.array([1.0, 0.0])
    base = run_chain(cfg_for(G2, seed=1), 2000)
    p = PerturbationSpec("score-step", u, 2.0, 49)
    pert = run_chain(cfg_for(G2, seed=1, perturbation=p), 2000)
    # last step: shift is exactly 2 * delta * lam / var along u
    g = make_grid(VE, 50)
    var = VE.forward_moments(g.forward_times[49]).var
    np.testing.assert_allclose(pert - base, np.outer(np.ones(2000), 2 * g.deltas[49] * 2.0 / var * u),
                               atol=1e-10)


def test_determinism_and_threads():
    n = 2 * BLOCK + 17
    cfg = cfg_for(G2, seed=5)
    a = run_chain(cfg, n, threads=1)
    b = run_chain(cfg, n, threads=3)
    assert np.array_equal(a, b)
    cfg2 = cfg_for(gmm2(), seed=5, n_steps=5)
    assert np.array_equal(run_chain(cfg2, BLOCK + 3, threads=1), run_chain(cfg2, BLOCK + 3, threads=2))
    assert not np.array_equal(a, run_chain(cfg_for(G2, seed=6), n))


def test_zero_steps_returns_init():
    init = np.arange(10.0).reshape(5, 2)
    g = make_grid(VE, 20)
    cfg = SamplerConfig(VE, g, G2, init=ExplicitInit(init, g.n_steps))
    np.testing.assert_array_equal(run_chain(cfg), init)


def test_non_finite_state_raises_fault():
    init = np.array([[np.inf, 0.0]])
    cfg = SamplerConfig(VE, make_grid(VE, 10), gmm2(), init=ExplicitInit(init, 4))
    with pytest.raises(SamplerFault) as info:
        run_chain(cfg)
    assert info.value.step == 4


def test_config_validation():
    g = make_grid(VE, 10)
    with pytest.raises(DomainError):
        PerturbationSpec("score-step", np.array([1.0, 1.0]), 1.0, 2)
    with pytest.raises(DomainError):
        PerturbationSpec("score-step", np.array([1.0, 0.0]), -1.0, 2)
    with pytest.raises(DomainError):
        SamplerConfig(VE, g, G2, perturbation=PerturbationSpec("score-step", np.array([1.0, 0.0]), 1.0, 10))
    with pytest.raises(DomainError):
        SamplerConfig(VE, make_grid(Schedule.ve_linear(horizon=2.0), 10), G2)


@pytest.mark.parametrize("scale,expect", [("variance", lambda v: v), ("std", np.sqrt),
                                          ("none", lambda v: 1.0)])
def test_init_shift_scales(scale, expect):
    g = make_grid(VE, 10)
    k = 4
    t = g.forward_times[k]
    u = np.array([0.0, 1.0])
    p = PerturbationSpec("init-bias", u, 3.0, t, scale)
    cfg = SamplerConfig(VE, g, G2, init=ExplicitInit(np.zeros((4, 2)), k), perturbation=p)
    var = VE.forward_moments(t).var
    np.testing.assert_allclose(init_shift(cfg), expect(var) * 3.0 * u, rtol=1e-14)
    bad = PerturbationSpec("init-bias", u, 3.0, t + 0.05, scale)
    with pytest.raises(DomainError):
        init_shift(SamplerConfig(VE, g, G2, init=ExplicitInit(np.zeros((4, 2)), k), perturbation=bad))


def test_terminal_mean_approaches_target():
    t = GaussianTarget([1.0, -2.0], [[0.5, 0.1], [0.1, 0.4]])
    out = run_chain(cfg_for(t, VP, n_steps=1000, seed=2), 50000)
    np.testing.assert_allclose(out.mean(axis=0), t.mean, atol=0.03)
    np.testing.assert_allclose(np.cov(out.T), t.cov, atol=0.03)


def test_vp_stationary_target_stays_stationary():
    alpha = 2.0
    sched = Schedule.vp_linear(alpha=alpha)
    t = GaussianTarget(np.zeros(2), np.eye(2) / alpha)
    covs = []
    for n in (100, 200):
        out = run_chain(cfg_for(t, sched, n_steps=n, seed=4), 100000)
        covs.append(np.cov(out.T))
    # O(delta) bias: Richardson extrapolation removes it to MC accuracy
    extrap = 2 * covs[1] - covs[0]
    np.testing.assert_allclose(extrap, np.eye(2) / alpha, atol=0.02)


def test_kernel_degenerate_interval():
    k = gaussian_backward_kernel(G2, VP, 0.5, 0.5 + 1e-9)
    np.testing.assert_allclose(k.A, np.eye(2), atol=1e-6)
    np.testing.assert_allclose(k.cov, 0.0, atol=1e-6)
    with pytest.raises(DomainError):
        gaussian_backward_kernel(G2, VP, 0.5, 0.5)


def test_kernel_centred_offset_zero():
    t = GaussianTarget(np.zeros(2), G2.cov)
    assert np.all(gaussian_backward_kernel(t, VE, 0.1, 0.7).offset == 0)


@pytest.mark.parametrize("sched", [VE, VP], ids=["ve", "vp"])
def test_kernel_offset_closed_form(sched):
    # the backward kernel maps the forward marginal means onto each other
    T = sched.horizon
    for s, t in ((0.0, 0.3), (0.2, 0.9), (0.5, 1.0)):
        k = gaussian_backward_kernel(G2, sched, s, t)
        m_s = sched.forward_moments(T - s).m
        m_t = sched.forward_moments(T - t).m
        np.testing.assert_allclose(k.offset, m_t * G2.mean - k.A @ (m_s * G2.mean), atol=1e-12)


@pytest.mark.parametrize("sched", [VE, VP], ids=["ve", "vp"])
def test_kernel_semigroup(sched):
    s, u, t = 0.1, 0.45, 0.8
    k1 = gaussian_backward_kernel(G2, sched, s, u)
    k2 = gaussian_backward_kernel(G2, sched, u, t)
    k = gaussian_backward_kernel(G2, sched, s, t)
    np.testing.assert_allclose(k2.A @ k1.A, k.A, atol=1e-8)
    np.testing.assert_allclose(k2.A @ k1.offset + k2.offset, k.offset, atol=1e-8)
    np.testing.assert_allclose(k2.A @ k1.cov @ k2.A.T + k2.cov, k.cov, atol=1e-8)


def test_kernel_preserves_marginals():
    T = VP.horizon
    s, t = 0.2, 0.7
    k = gaussian_backward_kernel(G2, VP, s, t)
    cov_s = G2.marginal_cov(VP, T - s)
    np.testing.assert_allclose(k.A @ cov_s @ k.A.T + k.cov, G2.marginal_cov(VP, T - t), atol=1e-12)


def test_ve_contraction_and_dirac_bound():
    gen = np.random.default_rng(0)
    for _ in range(50):
        s, t = np.sort(gen.uniform(0, 1, 2))
        k = gaussian_backward_kernel(G2, VE, s, t)
        norm = np.linalg.norm(k.A, 2)
        assert norm < 1
        x, y = gen.standard_normal((2, 2))
        # W2 between the two Gaussians with equal covariance is the mean gap
        assert np.linalg.norm(k.mean(x) - k.mean(y)) <= norm * np.linalg.norm(x - y) + 1e-12
        ratios, pref = contraction_ratios(G2, VE, s, t)
        assert pref * ratios.max() == pytest.approx(norm, rel=1e-10)


def test_kernel_vs_em_fixed_point():
    s, t = 0.3, 0.9
    k = gaussian_backward_kernel(G2, VP, s, t)
    x0 = np.linalg.solve(np.eye(2) - k.A, k.offset)
    res = kernel_vs_em(G2, VP, s, t, x0, 20000, 512, seed=1, antithetic=False)
    se = np.sqrt(np.trace(k.cov) / 20000)
    assert res.mean_error <= 3 * se + 2e-3


def test_kernel_vs_em_halving_vp():
    s, t = 0.0, 1.0
    errs = [kernel_vs_em(G2, VP, s, t, [2.0, -1.0], 2000, n, seed=0).mean_error for n in (128, 256)]
    assert 0.4 <= errs[1] / errs[0] <= 0.6


@pytest.mark.parametrize("ext", ["csv", "bin"])
def test_sample_io_roundtrip(tmp_path, ext):
    x = np.random.default_rng(0).standard_normal((7, 3))
    p = tmp_path / f"x.{ext}"
    write_samples(p, x)
    np.testing.assert_array_equal(read_samples(p), x)
    if ext == "bin":
        raw = p.read_bytes()
        assert raw[:8] == (3).to_bytes(4, "little") + (7).to_bytes(4, "little")
        assert len(raw) == 8 + 7 * 3 * 8
