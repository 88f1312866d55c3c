"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from harrisdiff.experiments import ExperimentConfig, run_init_bias, run_score_perturb
from harrisdiff.harris import (
    Dissipativity, HarrisConstants, assemble_bound, drift_pair, drift_pair_quadrature,
    harris_constants, kl_decay_bound, kl_forward_marginal, log_minorization_epsilon,
    minorization_window, minorization_z,
)
from harrisdiff.metrics import rho_b_1d, w2_gaussian_1d
from harrisdiff.sampler import (
    ExplicitInit, SamplerConfig, contraction_ratios, gaussian_backward_kernel, kernel_vs_em,
    run_chain,
)
from harrisdiff.schedule import Grid, Schedule, make_grid
from harrisdiff.target import GaussianTarget, GmmTarget, dissipativity_check
from harrisdiff.cli import load_config


# 1. Gaussian kernel oracle ------------------------------------------------------------

C1_TARGET = GaussianTarget([1.0, -0.5], [[0.2, 0.05], [0.05, 0.1]])
C1_X0 = [[0.0, 0.0], [1.0, 1.0], [-2.0, 0.5], [3.0, -3.0], [0.5, -4.0]]
C1_STEPS = (512, 1024, 2048)


@pytest.fixture(scope="module")
def kernel_runs():
    started = time.perf_counter()
    out = {}
    for name, sched in (("VE", Schedule.ve_linear()), ("VP", Schedule.vp_linear())):
        out[name] = np.array([
            [kernel_vs_em(C1_TARGET, sched, 0.0, 1.0, x0, 100000, n, seed=1) for n in C1_STEPS]
            for x0 in C1_X0
        ])  # (x0, n_steps, [mean_err, cov_err])
    out["seconds"] = time.perf_counter() - started
    return out


@pytest.mark.parametrize("name", ["VE", "VP"])
def test_c1_kernel_accuracy(kernel_runs, verdict, name):
    errs = kernel_runs[name][:, -1, :]
    mean_err, cov_err = errs[:, 0].max(), errs[:, 1].max()
    ok = mean_err <= 2e-3 and cov_err <= 5e-3
    verdict(f"1 kernel oracle {name} N=2048", ok,
            f"max mean err {mean_err:.2e} (<= 2e-3), max cov err {cov_err:.2e} (<= 5e-3)")
    assert ok


def _halving_ratios(runs):
    m = runs[:, :, 0]
    return m[:, 1] / m[:, 0], m[:, 2] / m[:, 1]


def test_c1_halving_vp(kernel_runs, verdict):
    r1, r2 = _halving_ratios(kernel_runs["VP"])
    ok = bool(np.all((r1 >= 0.4) & (r1 <= 0.6) & (r2 >= 0.4) & (r2 <= 0.6)))
    verdict("1 halving VP", ok, f"ratios {np.round(r1, 4).tolist()} / {np.round(r2, 4).tolist()}")
    assert ok


@pytest.mark.xfail(strict=True, reason=(
    "the VE Euler-Maruyama mean map is exact for Gaussian targets, so the mean error is "
    "round-off (~1e-15) at every step count and its ratios are not ~1/2"))
def test_c1_halving_ve(kernel_runs, verdict):
    r1, r2 = _halving_ratios(kernel_runs["VE"])
    top = kernel_runs["VE"][:, :, 0].max()
    ok = bool(np.all((r1 >= 0.4) & (r1 <= 0.6) & (r2 >= 0.4) & (r2 <= 0.6)))
    verdict("1 halving VE", ok, f"mean errors all <= {top:.1e}; ratios {np.round(r1, 3).tolist()} / "
            f"{np.round(r2, 3).tolist()}")
    assert ok


def test_c1_runtime(kernel_runs, verdict):
    sec = kernel_runs["seconds"]
    ok = sec <= 120
    verdict("1 runtime", ok, f"{sec:.1f} s for 2 schedules x 5 x0 x 3 step counts (<= 120 s)")
    assert ok


# 2. Contraction -----------------------------------------------------------------------

def _random_spd(gen, d, top):
    q, _ = np.linalg.qr(gen.standard_normal((d, d)))
    ev = gen.uniform(0.05, 1.0, d)
    ev *= top / ev.max()
    return (q * ev) @ q.T


def test_c2_contraction(verdict):
    gen = np.random.default_rng(20)
    ve, alpha = Schedule.ve_linear(), 1.0
    vp = Schedule.vp_linear(alpha=alpha)
    worst = {"VE": 0.0, "VP": 0.0}
    for _ in range(200):
        s, t = np.sort(gen.uniform(0, 1, 2))
        for name, sched, top in (("VE", ve, gen.uniform(0.1, 20)), ("VP", vp, gen.uniform(0.1, 1 / alpha))):
            target = GaussianTarget(gen.standard_normal(3), _random_spd(gen, 3, top))
            A = gaussian_backward_kernel(target, sched, s, t).A
            worst[name] = max(worst[name], np.linalg.norm(A, 2))
    # counterexample: lambda_max = 10 / alpha, interval near the data end
    big = GaussianTarget(np.zeros(2), np.diag([10.0 / alpha, 0.5]))
    ratios, pref = contraction_ratios(big, vp, 0.95, 0.999)
    ok = worst["VE"] < 1 and worst["VP"] < 1 and ratios.max() > 1
    verdict("2 contraction", ok,
            f"max ||A|| VE {worst['VE']:.6f}, VP {worst['VP']:.6f} over 200 pairs; "
            f"counterexample eigen-ratio {ratios.max():.4f} > 1 (prefactor {pref:.4f}, "
            f"||A|| {pref * ratios.max():.4f})")
    assert ok


# 3. Closed-form drift constants vs quadrature -------------------------------------------

def test_c3_drift_closed_forms(verdict):
    gen = np.random.default_rng(30)
    started = time.perf_counter()
    worst = 0.0
    for kind in ("VE", "VP"):
        for _ in range(50):
            bmin = gen.uniform(0.05, 2.0)
            bmax = bmin + gen.uniform(0.0, 20.0)
            T = gen.uniform(0.5, 2.0)
            if kind == "VE":
                sched = Schedule.ve_linear(bmin, bmax, T)
                a0 = gen.uniform(0.05, 5.0)
            else:
                alpha = gen.uniform(0.2, 3.0)
                sched = Schedule.vp_linear(bmin, bmax, T, alpha=alpha)
                a0 = alpha / 2 + gen.uniform(0.05, 5.0)
            d0 = Dissipativity(a0, gen.uniform(0, 5), int(gen.integers(1, 10)))
            s, t = np.sort(gen.uniform(0, T, 2))
            c, q = drift_pair(sched, d0, s, t), drift_pair_quadrature(sched, d0, s, t)
            worst = max(worst, abs(c.gamma / q.gamma - 1), abs(c.beta_const / q.beta_const - 1))
    sec = time.perf_counter() - started
    ok = worst <= 1e-8 and sec <= 10
    verdict("3 drift closed forms", ok, f"max rel diff {worst:.2e} (<= 1e-8) over 100 configs, "
            f"{sec:.1f} s (<= 10 s)")
    assert ok


# 4. Drift inequality by Monte Carlo ---------------------------------------------------------

def test_c4_drift_inequality_mc(verdict):
    gen = np.random.default_rng(40)
    started = time.perf_counter()
    targets = [
        GaussianTarget([0.5], [[0.5]]),
        GmmTarget([0.35, 0.65], [[-1.5], [1.0]], [[[0.3]], [[0.2]]]),
    ]
    schedules = [Schedule.ve_linear(), Schedule.vp_linear()]
    worst = -np.inf
    for i in range(20):
        target = targets[i % 2]
        sched = schedules[(i // 2) % 2]
        a0, b0 = dissipativity_check(target)
        d0 = Dissipativity(a0, b0, 1)
        s, t = np.sort(gen.uniform(0, 1, 2))
        if t - s < 0.05:
            t = min(1.0, s + 0.05)
        dp = drift_pair(sched, d0, s, t)
        rc = 2 * dp.beta_const / dp.one_minus_gamma
        x = gen.uniform(-1, 1) * 3 * math.sqrt(rc)
        grid = Grid.between(sched, s, t, 400)
        cfg = SamplerConfig(sched, grid, target, init=ExplicitInit(np.full((100000, 1), x), 0),
                            seed=i, salt=(4,))
        out = run_chain(cfg)[:, 0] ** 2
        se = out.std(ddof=1) / math.sqrt(len(out))
        slack = dp.gamma * x * x + dp.beta_const + 3 * se - out.mean()
        worst = max(worst, -slack / (dp.gamma * x * x + dp.beta_const))
    sec = time.perf_counter() - started
    ok = worst <= 0 and sec <= 300
    verdict("4 drift inequality", ok, f"20 cases, worst (E||X||^2 - bound - 3SE)/bound = {worst:.3e} "
            f"(<= 0), {sec:.1f} s (<= 300 s)")
    assert ok


# 5. Minorization ----------------------------------------------------------------------------

def test_c5_minorization(verdict):
    gen = np.random.default_rng(50)
    sched = Schedule.vp_linear()
    bad_range = bad_mono = 0
    worst_z = 0.0
    for d in (1, 2, 3):
        target = GaussianTarget(gen.standard_normal(d) * 0.5, _random_spd(gen, d, gen.uniform(0.2, 2)))
        for _ in range(50):
            s, t = np.sort(gen.uniform(0, 1, 2))
            r1, r2 = np.sort(gen.uniform(0.01, 50, 2))
            l1 = log_minorization_epsilon(target, sched, s, t, r1)
            l2 = log_minorization_epsilon(target, sched, s, t, r2)
            bad_range += not (-np.inf < l1 < 0 and -np.inf < l2 < 0)
            bad_mono += not l2 < l1
        # Z closed form vs Monte Carlo
        c = minorization_window(sched, 0.2, 0.6)
        x = target.sample(200000, np.random.default_rng(d))
        vals = np.exp(-0.5 * np.sum(x * x, axis=1) / c) / (2 * np.pi * c) ** (d / 2)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        worst_z = max(worst_z, abs(minorization_z(target, c) - vals.mean()) / se)
    ok = bad_range == 0 and bad_mono == 0 and worst_z <= 3
    verdict("5 minorization", ok, f"log eps outside (-inf, 0): {bad_range}, non-decreasing: {bad_mono} "
            f"of 150; Z vs MC worst |diff|/SE {worst_z:.2f} (<= 3)")
    assert ok


# 6. Harris assembly --------------------------------------------------------------------------

def test_c6_assembly(verdict):
    sched = Schedule.vp_linear(0.1, 2.0)
    grid = make_grid(sched, 12)
    target = GaussianTarget([0.3], [[0.6]])
    hc = harris_constants(target, sched, grid, Dissipativity(*dissipativity_check(target), 1))
    n = grid.n_steps
    zero = assemble_bound(grid, hc, [(0.0, 0.0, 0.0)] * n)
    exact_zero = zero == hc.alpha_star**n * hc.LambdaT * hc.Cmix
    synth = HarrisConstants([], 0.87, 0.13, 0.5, 0.8, 1.9)
    loc = np.random.default_rng(60).uniform(0, 3, (n, 3))
    plain = 0.87**n * 0.8 * 1.9
    for k in range(1, n + 1):
        dk = grid.deltas[k - 1]
        plain += 0.87 ** (n - k) * (dk * loc[k - 1, 0] + math.sqrt(dk) * loc[k - 1, 1] * loc[k - 1, 2])
    got = assemble_bound(grid, synth, loc.tolist())
    rel = abs(got - plain) / plain
    ok = exact_zero and rel <= 1e-12
    verdict("6 assembly", ok, f"zero locals exact: {exact_zero}; synthetic rel diff {rel:.1e} (<= 1e-12)")
    assert ok


# 7. VP mixing ---------------------------------------------------------------------------------

def test_c7_vp_mixing(verdict):
    target = GaussianTarget([1.2], [[0.35]])
    worst = 0.0
    quad_err = 0.0
    for T in np.linspace(0.2, 6.0, 20):
        sched = Schedule.vp_linear(0.1, 2.0, float(T), alpha=1.0)
        kl = kl_forward_marginal(target, sched)
        bound = kl_decay_bound(target, sched)
        worst = max(worst, kl / bound)
        fm = sched.forward_moments(float(T))
        m, v = fm.m * 1.2, fm.m**2 * 0.35 + fm.var

        def f(x):
            p = norm.pdf(x, m, math.sqrt(v))
            return p * (norm.logpdf(x, m, math.sqrt(v)) - norm.logpdf(x, 0, 1))

        ref, _ = quad(f, m - 40 * math.sqrt(v), m + 40 * math.sqrt(v), epsabs=1e-15, limit=200)
        quad_err = max(quad_err, abs(kl - ref) / max(ref, 1e-300))
    ok = worst <= 1
    verdict("7 VP mixing", ok, f"max KL(p_T||pi)/bound {worst:.4f} (<= 1) over 20 horizons; "
            f"closed-form KL vs quadrature rel diff {quad_err:.1e}")
    assert ok


# 8. Weighted TV inequalities ----------------------------------------------------------------

def test_c8_weighted_tv(verdict):
    gen = np.random.default_rng(80)
    min_tv = min_w2 = np.inf
    for _ in range(20):
        m1, m2 = gen.uniform(-2, 2, 2)
        s1, s2 = gen.uniform(0.3, 2.0, 2)
        p = lambda x, m=m1, s=s1: norm.pdf(x, m, s)
        q = lambda x, m=m2, s=s2: norm.pdf(x, m, s)
        env = [(m1, s1), (m2, s2)]
        tv2 = rho_b_1d(p, q, 0.0, env)
        w2sq = w2_gaussian_1d(m1, s1, m2, s2) ** 2
        for b in (0.1, 1.0, 10.0):
            rho = rho_b_1d(p, q, b, env)
            min_tv = min(min_tv, rho - tv2)
            min_w2 = min(min_w2, 2 / b * rho - w2sq)
    ok = min_tv >= 0 and min_w2 >= 0
    verdict("8 weighted TV", ok, f"min slack rho_b - 2TV {min_tv:.3e}, (2/b) rho_b - W2^2 {min_w2:.3e} (>= 0)")
    assert ok


# 9. Qualitative forgetting ---------------------------------------------------------------------

def _desk(name, **kw):
    return ExperimentConfig.from_dict({**load_config(f"builtin:{name}"), **kw})


def test_c9_init_bias(verdict):
    cfg = _desk("desk_init_bias_gaussian", magnitudes=[5.0, 20.0])
    started = time.perf_counter()
    rep = run_init_bias(cfg)
    sec = time.perf_counter() - started
    ts = sorted({r["t"] for r in rep.rows})
    parts, ok = [], sec <= 600
    for lam in (5.0, 20.0):
        lo, hi = rep.mean(ts[0], lam), rep.mean(ts[-1], lam)
        ok &= hi <= 0.5 * lo
        parts.append(f"lambda={lam:g}: t={ts[-1]:.3g} {hi:.4f} vs t={ts[0]:.3g} {lo:.4f}")
    verdict("9 init-bias forgetting", ok, "; ".join(parts) + f"; {sec:.0f} s (<= 600 s)")
    assert ok


def test_c9_score_perturb(verdict):
    cfg = _desk("desk_score_perturb_gaussian", magnitudes=[5.0, 20.0])
    started = time.perf_counter()
    rep = run_score_perturb(cfg)
    sec = time.perf_counter() - started
    first, last = 0, make_grid(Schedule.karras(), 100).n_steps - 1
    parts, ok = [], sec <= 600
    for lam in (5.0, 20.0):
        early, late = rep.mean(first, lam), rep.mean(last, lam)
        ok &= early <= 0.5 * late
        parts.append(f"lambda={lam:g}: first step {early:.4f} vs last step {late:.4f}")
    verdict("9 score-perturb forgetting", ok, "; ".join(parts) + f"; {sec:.0f} s (<= 600 s)")
    assert ok


# 10. Determinism across thread counts -------------------------------------------------------

@pytest.mark.parametrize("name,runner", [
    ("desk_init_bias_gaussian", run_init_bias),
    ("desk_score_perturb_gaussian", run_score_perturb),
    ("desk_init_bias_gmm", run_init_bias),
])
def test_c10_determinism(tmp_path, verdict, name, runner):
    cfg = _desk(name, replicates=2, n_samples=2000, magnitudes=[0.0, 5.0])
    if cfg.experiment == "init-bias":
        cfg = _desk(name, replicates=2, n_samples=2000, magnitudes=[0.0, 5.0], times=[0.05, 0.5])
    if cfg.metric == "max_sw":
        cfg = _desk(name, replicates=2, n_samples=1000, magnitudes=[0.0, 5.0], times=[0.05, 0.5],
                    worst_case_samples=1000,
                    max_sw={"step": 1e-3, "tol": 1e-7, "max_iter": 100000, "restarts": 2})
    runner(cfg, threads=1).write(tmp_path / "a.csv")
    runner(cfg, threads=4).write(tmp_path / "b.csv")
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes() and \
        (tmp_path / "a.summary.csv").read_bytes() == (tmp_path / "b.summary.csv").read_bytes()
    verdict(f"10 determinism {name}", same, "threads 1 vs 4 report and summary CSVs byte-identical"
            if same else "CSV bytes differ")
    assert same
