"""Time-changed Euler-Maruyama reverse chain and the exact Gaussian kernel.

One step from reverse time ``t_k`` to ``t_{k+1}`` reads

    x' = x + D_k (alpha x + 2 s_{T - t_k}(x)) + sqrt(2 D_k) xi,

with ``D_k = int_{t_k}^{t_{k+1}} beta(T - u) du`` taken from the grid.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import roots_legendre

from harrisdiff import rng as rngmod
from harrisdiff.errors import AccuracyError, DomainError, SamplerFault
from harrisdiff.target import GaussianTarget

# chains are drawn in fixed blocks, each with its own stream, so results do
# not depend on the number of worker threads
BLOCK = 16384

INIT_SCALES = ("variance", "std", "none")


@dataclass(frozen=True)
class PerturbationSpec:
    """A single injected error.

    ``mode="init-bias"`` shifts the starting samples by ``scale * lam * u``
    where ``scale`` is ``var(t_bias)`` (``init_scale="variance"``), its square
    root (``"std"``) or 1 (``"none"``); ``at`` is the forward time
    ``t_bias``.  ``mode="score-step"`` adds ``(lam / var(t_err)) u`` to the
    score used at step ``at`` only.
    """

    mode: str
    direction: np.ndarray
    magnitude: float
    at: float
    init_scale: str = "variance"

    def __post_init__(self):
        if self.mode not in ("init-bias", "score-step"):
            raise DomainError(f"unknown perturbation mode {self.mode!r}")
        u = np.asarray(self.direction, dtype=float).ravel()
        if abs(np.linalg.norm(u) - 1.0) > 1e-12:
            raise DomainError("perturbation direction must be a unit vector")
        if not self.magnitude >= 0:
            raise DomainError("perturbation magnitude must be nonnegative")
        if self.init_scale not in INIT_SCALES:
            raise DomainError(f"init_scale must be one of {INIT_SCALES}")
        if self.mode == "score-step" and int(self.at) != self.at:
            raise DomainError("score-step perturbations need an integer step index")
        object.__setattr__(self, "direction", u)


@dataclass(frozen=True)
class ExplicitInit:
    """Start the chain from ``samples`` at grid index ``start_index``."""

    samples: np.ndarray
    start_index: int = 0


@dataclass
class SamplerConfig:
    schedule: object
    grid: object
    target: object
    init: Optional[ExplicitInit] = None
    perturbation: Optional[PerturbationSpec] = None
    seed: int = 0
    salt: tuple = ()
    antithetic: bool = False

    def __post_init__(self):
        g = self.grid
        if abs(g.horizon - self.schedule.horizon) > 1e-12 * self.schedule.horizon:
            raise DomainError("grid and schedule horizons differ")
        if self.init is None and g.times[0] != 0.0:
            raise DomainError("reference initialization must start at reverse time 0")
        if self.init is not None and not 0 <= self.init.start_index <= g.n_steps:
            raise DomainError("start_index outside the grid")
        p = self.perturbation
        if p is not None and p.direction.shape[0] != self.target.dim:
            raise DomainError("perturbation direction has the wrong dimension")
        if p is not None and p.mode == "score-step" and not 0 <= p.at < g.n_steps:
            raise DomainError("score-step index outside the grid")

    @property
    def start_index(self):
        return 0 if self.init is None else int(self.init.start_index)


class _Steps:
    """Per-step score evaluators and constants for one configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.alpha = cfg.schedule.alpha
        self._cache = {}
        self._affine = {}

    def _shift(self, k):
        p = self.cfg.perturbation
        if p is not None and p.mode == "score-step" and int(p.at) == k and p.magnitude > 0:
            t = self.cfg.grid.forward_times[k]
            var = self.cfg.schedule.forward_moments(t).var
            return (p.magnitude / var) * p.direction
        return None

    def score_fn(self, k):
        fn = self._cache.get(k)
        if fn is None:
            cfg = self.cfg
            t = cfg.grid.forward_times[k]
            target = cfg.target
            if isinstance(target, GaussianTarget):
                prec = target.precision(cfg.schedule, t)
                centre = cfg.schedule.forward_moments(t).m * target.mean

                def fn(x, prec=prec, centre=centre):
                    return -(x - centre) @ prec
            else:
                fn = target.marginal(cfg.schedule, t).score
            shift = self._shift(k)
            if shift is not None:
                base = fn

                def fn(x, base=base, shift=shift):
                    return base(x) + shift
            self._cache[k] = fn
        return fn

    def affine(self, k):
        """``(M, c)`` with ``x' = M x + c + noise`` for Gaussian targets (column layout)."""
        out = self._affine.get(k)
        if out is None:
            cfg = self.cfg
            t = cfg.grid.forward_times[k]
            delta = cfg.grid.deltas[k]
            target = cfg.target
            prec = target.precision(cfg.schedule, t)
            centre = cfg.schedule.forward_moments(t).m * target.mean
            M = (1.0 + delta * self.alpha) * np.eye(target.dim) - 2.0 * delta * prec
            c = 2.0 * delta * (prec @ centre)
            shift = self._shift(k)
            if shift is not None:
                c = c + 2.0 * delta * shift
            out = (M, c[:, None])
            self._affine[k] = out
        return out

    def step(self, x, k, noise):
        """Generic step on an ``(n, d)`` state with ``noise`` of the same shape."""
        delta = self.cfg.grid.deltas[k]
        out = x + delta * (self.alpha * x + 2.0 * self.score_fn(k)(x))
        if noise is not None:
            out += np.sqrt(2.0 * delta) * noise
        if not np.all(np.isfinite(out)):
            raise SamplerFault(k)
        return out

    def step_columns(self, xt, k, noise_t):
        """Affine step on a ``(d, n)`` state; Gaussian targets only."""
        M, c = self.affine(k)
        out = M @ xt
        out += c
        out += np.sqrt(2.0 * self.cfg.grid.deltas[k]) * noise_t
        if not np.all(np.isfinite(out)):
            raise SamplerFault(k)
        return out


def em_step(x, k, cfg, rng=None, noise=None):
    """One reverse Euler-Maruyama step from grid index ``k``.

    ``noise`` overrides the Gaussian draw; otherwise it comes from ``rng``.
    """
    if not 0 <= k < cfg.grid.n_steps:
        raise DomainError(f"step index {k} outside [0, {cfg.grid.n_steps})")
    x = np.asarray(x, dtype=float)
    if noise is None:
        noise = rngmod.as_generator(rng).standard_normal(x.shape)
    return _Steps(cfg).step(x, k, noise)


def init_shift(cfg):
    """Additive shift applied to the starting samples (zero without init-bias)."""
    p = cfg.perturbation
    d = cfg.target.dim
    if p is None or p.mode != "init-bias" or p.magnitude == 0:
        return np.zeros(d)
    t_start = cfg.grid.forward_times[cfg.start_index]
    if abs(t_start - p.at) > 1e-9 * cfg.schedule.horizon:
        raise DomainError(f"init-bias time {p.at} differs from the chain start time {t_start}")
    var = cfg.schedule.forward_moments(t_start).var
    scale = {"variance": var, "std": np.sqrt(var), "none": 1.0}[p.init_scale]
    return scale * p.magnitude * p.direction


def _normals(gen, d, n, antithetic):
    """Standard normals in ``(d, n)`` layout, optionally in +/- pairs along ``n``."""
    if not antithetic:
        return gen.standard_normal((d, n))
    half = gen.standard_normal((d, (n + 1) // 2))
    return np.concatenate([half, -half], axis=1)[:, :n]


def _run_block(cfg, steps, b, lo, hi, shift):
    gen = rngmod.stream(cfg.seed, rngmod.SALT_CHAIN, *cfg.salt, b)
    n, d = hi - lo, cfg.target.dim
    if cfg.init is None:
        sd = np.sqrt(cfg.schedule.stationary_var())
        xt = sd * _normals(gen, d, n, cfg.antithetic)
    else:
        xt = np.array(cfg.init.samples[lo:hi], dtype=float).T.copy()
    xt += shift[:, None]
    if not np.all(np.isfinite(xt)):
        raise SamplerFault(cfg.start_index)
    if isinstance(cfg.target, GaussianTarget):
        for k in range(cfg.start_index, cfg.grid.n_steps):
            xt = steps.step_columns(xt, k, _normals(gen, d, n, cfg.antithetic))
        return xt.T
    x = np.ascontiguousarray(xt.T)
    for k in range(cfg.start_index, cfg.grid.n_steps):
        x = steps.step(x, k, _normals(gen, d, n, cfg.antithetic).T)
    return x


def run_chain(cfg, n_samples=None, threads=1):
    """Terminal states of ``n_samples`` independent chains.

    With an explicit initialization ``n_samples`` defaults to its size.
    Block ``b`` of ``BLOCK`` chains draws from the stream keyed by
    ``(seed, SALT_CHAIN, *salt, b)``.
    """
    if cfg.init is not None:
        init = np.atleast_2d(np.asarray(cfg.init.samples, dtype=float))
        if n_samples is None:
            n_samples = init.shape[0]
        if init.shape != (n_samples, cfg.target.dim):
            raise DomainError("explicit initialization has the wrong shape")
    if n_samples is None or n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    steps = _Steps(cfg)
    for k in range(cfg.start_index, cfg.grid.n_steps):
        if isinstance(cfg.target, GaussianTarget):
            steps.affine(k)
        else:
            steps.score_fn(k)
    shift = init_shift(cfg)
    bounds = [(b, lo, min(lo + BLOCK, n_samples)) for b, lo in enumerate(range(0, n_samples, BLOCK))]

    def job(arg):
        return _run_block(cfg, steps, *arg, shift)

    if threads <= 1 or len(bounds) == 1:
        parts = [job(a) for a in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, bounds))
    return np.concatenate(parts)


def reference_samples(schedule, d, n, seed, salt=()):
    """Draws from ``pi_infty``: ``N(0, var(T) I)`` (VE) or ``N(0, I/alpha)`` (VP)."""
    gen = rngmod.stream(seed, rngmod.SALT_INIT, *salt)
    return np.sqrt(schedule.stationary_var()) * gen.standard_normal((n, d))


@dataclass(frozen=True)
class GaussianBackwardKernel:
    """``X_t | X_s = x  ~  N(A x + offset, cov)`` for the exact backward process."""

    A: np.ndarray
    offset: np.ndarray
    cov: np.ndarray

    def mean(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.offset


_GL_NODES, _GL_WEIGHTS = roots_legendre(64)


def _gauss_legendre(f, a, b, rtol=1e-10, max_level=16):
    """Composite 64-node Gauss-Legendre, doubling panels until converged."""
    prev = None
    for level in range(max_level + 1):
        edges = np.linspace(a, b, 2**level + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
        weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
        est = weights @ f(nodes)
        if prev is not None:
            scale = np.maximum(np.abs(est), np.finfo(float).tiny)
            if np.all(np.abs(est - prev) <= rtol * scale):
                return est
        prev = est
    raise AccuracyError("offset quadrature did not converge", estimate=est,
                        error=float(np.max(np.abs(est - prev))))


def gaussian_backward_kernel(target, schedule, s, t):
    """Exact backward transition of a Gaussian target between reverse times ``s < t``.

    In the eigenbasis of ``Sigma`` every ``Sigma_u = m_u^2 Sigma + var_u I`` is
    diagonal, so the mean map, offset integral and covariance reduce to
    scalar expressions per eigenvalue.
    """
    if not isinstance(target, GaussianTarget):
        raise DomainError("the exact backward kernel needs a Gaussian target")
    T = schedule.horizon
    if not 0 <= s < t <= T:
        raise DomainError(f"need 0 <= s < t <= T, got s={s}, t={t}")
    lam, V = target.eigvals, target.eigvecs
    alpha = schedule.alpha

    def sig(u_fwd):
        fm = schedule.forward_moments(u_fwd)
        return np.multiply.outer(np.atleast_1d(fm.m) ** 2, lam) + np.atleast_1d(fm.var)[:, None]

    sig_s, sig_t = sig(T - s)[0], sig(T - t)[0]
    decay = np.exp(-alpha * schedule.beta_integral(T - t, T - s))
    ratio = sig_t / sig_s
    A = (V * (decay * ratio)) @ V.T
    cov_diag = sig_t - decay**2 * sig_t * ratio
    cov = (V * np.maximum(cov_diag, 0.0)) @ V.T

    mu_e = V.T @ target.mean
    if np.all(mu_e == 0):
        offset = np.zeros(target.dim)
    else:
        def integrand(r):
            fwd = T - r
            fm = schedule.forward_moments(fwd)
            grow = np.exp(alpha * schedule.beta_integral(fwd, np.full_like(fwd, T - s)))
            w = schedule.beta_at(fwd) * grow * fm.m
            return w[:, None] / sig(fwd) ** 2

        integral = _gauss_legendre(integrand, s, t)
        offset = V @ (2.0 * decay * sig_t * integral * mu_e)
    return GaussianBackwardKernel(A, offset, 0.5 * (cov + cov.T))


def contraction_ratios(target, schedule, s, t):
    """Per-eigendirection ratios ``Sigma_{T-t} / Sigma_{T-s}`` and the prefactor.

    ``||A_{s:t}||_2 = prefactor * max(ratios)``.
    """
    T = schedule.horizon
    fs, ft = schedule.forward_moments(T - s), schedule.forward_moments(T - t)
    ratios = (ft.m**2 * target.eigvals + ft.var) / (fs.m**2 * target.eigvals + fs.var)
    prefactor = float(np.exp(-schedule.alpha * schedule.beta_integral(T - t, T - s)))
    return ratios, prefactor


class KernelComparison(NamedTuple):
    mean_error: float
    cov_error: float


def kernel_vs_em(target, schedule, s, t, x0, n_mc, n_steps, seed=0, antithetic=True,
                 threads=1, salt=()):
    """Compare ``n_mc`` EM chains from ``x0`` on ``[s, t]`` with the exact kernel.

    Returns the Euclidean norm of the mean discrepancy and the spectral norm
    of the covariance discrepancy.  Antithetic noise pairs are used by
    default; the chain output is affine in the noise for Gaussian targets,
    so they remove Monte Carlo error from the empirical mean without
    changing its expectation.
    """
    from harrisdiff.schedule import Grid

    x0 = np.asarray(x0, dtype=float)
    grid = Grid.between(schedule, s, t, n_steps)
    init = ExplicitInit(np.broadcast_to(x0, (n_mc, target.dim)), 0)
    cfg = SamplerConfig(schedule, grid, target, init=init, seed=seed, salt=salt,
                        antithetic=antithetic)
    out = run_chain(cfg, n_mc, threads=threads)
    kern = gaussian_backward_kernel(target, schedule, s, t)
    mean = out.mean(axis=0)
    cov = np.cov(out, rowvar=False).reshape(target.dim, target.dim)
    mean_err = float(np.linalg.norm(mean - kern.mean(x0)))
    cov_err = float(np.linalg.norm(0.5 * (cov + cov.T) - kern.cov, ord=2))
    return KernelComparison(mean_err, cov_err)
