"""Distances between sample clouds and between densities."""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from harrisdiff import rng as rngmod
from harrisdiff.errors import AccuracyError, DomainError


class EmpiricalCloud:
    """``n x d`` samples with cached mean and unbiased covariance."""

    def __init__(self, samples):
        x = np.asarray(samples, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 2:
            raise DomainError("a cloud needs at least two points in an (n, d) array")
        self.samples = x

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]

    @cached_property
    def mean(self):
        return self.samples.mean(axis=0)

    @cached_property
    def cov(self):
        c = np.atleast_2d(np.cov(self.samples, rowvar=False))
        return 0.5 * (c + c.T)

    def moments(self):
        return self.mean, self.cov


def _psd_sqrt(c, name):
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -1e-10 * scale:
        raise DomainError(f"{name} is not positive semidefinite (eigenvalue {w[0]})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def bures_w2(g1, g2):
    """2-Wasserstein distance between ``N(m1, C1)`` and ``N(m2, C2)``.

    ``W2^2 = |m1 - m2|^2 + tr(C1 + C2 - 2 (C2^{1/2} C1 C2^{1/2})^{1/2})``
    """
    m1, c1 = np.atleast_1d(g1[0]).astype(float), np.atleast_2d(g1[1]).astype(float)
    m2, c2 = np.atleast_1d(g2[0]).astype(float), np.atleast_2d(g2[1]).astype(float)
    if c1.shape != c2.shape or m1.shape != m2.shape:
        raise DomainError("Gaussian arguments have different dimensions")
    _psd_sqrt(c1, "first covariance")
    r2 = _psd_sqrt(c2, "second covariance")
    cross = _psd_sqrt(r2 @ c1 @ r2, "cross term")
    val = float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * np.trace(cross))
    return math.sqrt(max(val, 0.0))


def _match_sizes(a, b, seed):
    if len(a) == len(b):
        return a, b
    n = min(len(a), len(b))
    warnings.warn(f"unequal sample sizes {len(a)} and {len(b)}; subsampling to {n}", RuntimeWarning)
    gen = rngmod.stream(seed, rngmod.SALT_SUBSAMPLE)
    if len(a) > n:
        a = a[np.sort(gen.choice(len(a), n, replace=False))]
    else:
        b = b[np.sort(gen.choice(len(b), n, replace=False))]
    return a, b


def sw_1d(a, b, seed=0):
    """1D 2-Wasserstein distance between two empirical measures of equal size."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    a, b = _match_sizes(a, b, seed)
    return math.sqrt(float(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class DirectionResult:
    u: np.ndarray
    value: float
    iterations: int
    converged: bool
    optimizer: str = "normalized projected gradient ascent"


def _sliced_objective(x, y, u):
    px, py = x @ u, y @ u
    ix, iy = np.argsort(px), np.argsort(py)
    diff = px[ix] - py[iy]
    val = float(np.mean(diff * diff))
    # scatter the matched differences back instead of gathering rows
    wx = np.empty_like(diff)
    wy = np.empty_like(diff)
    wx[ix] = diff
    wy[iy] = diff
    grad = (2.0 / len(diff)) * (wx @ x - wy @ y)
    return val, grad


def _ascend(x, y, u, step, tol, max_iter):
    f, g = _sliced_objective(x, y, u)
    eta = step
    for it in range(1, max_iter + 1):
        g_r = g - (g @ u) * u
        gn = np.linalg.norm(g_r)
        if gn == 0.0:
            return u, f, it, True
        cand = u + eta * g_r / gn
        cand /= np.linalg.norm(cand)
        move = float(np.linalg.norm(cand - u))
        if move < tol:
            return u, f, it, True
        f_new, g_new = _sliced_objective(x, y, cand)
        if f_new >= f:
            u, f, g = cand, f_new, g_new
        else:
            eta *= 0.5
    return u, f, max_iter, False


def max_sw(x, y, step=1e-3, tol=1e-7, max_iter=100000, restarts=8, seed=0, threads=1):
    """Max-sliced 2-Wasserstein distance and its maximizing direction.

    Each restart ascends ``u -> W2(<x, u>, <y, u>)^2`` on the unit sphere
    with normalized Riemannian gradient steps of length at most ``step``;
    a step that lowers the objective is rejected and the step length halved.
    A restart stops once the proposed move is shorter than ``tol``.
    Restart ``r`` draws its start from stream ``(seed, SALT_MAXSW, r)``.
    """
    xs = x.samples if isinstance(x, EmpiricalCloud) else np.atleast_2d(np.asarray(x, float))
    ys = y.samples if isinstance(y, EmpiricalCloud) else np.atleast_2d(np.asarray(y, float))
    if xs.shape[1] == 0:
        raise DomainError("max_sw needs d >= 1")
    if xs.shape[1] != ys.shape[1]:
        raise DomainError("clouds have different dimensions")
    if restarts < 1:
        raise DomainError("restarts must be >= 1")
    xs, ys = _match_sizes(xs, ys, seed)
    d = xs.shape[1]

    def run(r):
        gen = rngmod.stream(seed, rngmod.SALT_MAXSW, r)
        u = gen.standard_normal(d)
        u /= np.linalg.norm(u)
        return _ascend(xs, ys, u, step, tol, max_iter)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]
    # first restart wins ties, so the result does not depend on scheduling
    best = max(range(restarts), key=lambda r: (results[r][1], -r))
    u, f, it, conv = results[best]
    return DirectionResult(u=u, value=math.sqrt(max(f, 0.0)), iterations=it, converged=conv)


def _gauss_tail(m, s, b, R):
    """``E[(1 + b X^2) 1{|X| > R}]`` for ``X ~ N(m, s^2)``."""
    total = 0.0
    for z, sign in (((R - m) / s, 1.0), ((-R - m) / s, -1.0)):
        # upper tail beyond z for sign=+1, lower tail below z for sign=-1
        mass = ndtr(-z) if sign > 0 else ndtr(z)
        phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        first = sign * s * phi  # E[(X - m) 1{tail}]
        second = s * s * (mass + sign * z * phi)  # E[(X - m)^2 1{tail}]
        total += mass + b * (second + 2.0 * m * first + m * m * mass)
    return total


def rho_b_1d(p, q, b, envelopes, tol=1e-10, points=None):
    """``int (1 + b x^2) |p(x) - q(x)| dx`` by adaptive quadrature.

    ``envelopes`` lists ``(mean, std)`` pairs of Gaussians whose sum
    dominates ``p + q`` in the tails; the window ``[-R, R]`` is widened until
    their weighted tail mass is below ``tol``.
    """
    if b < 0:
        raise DomainError("b must be nonnegative")
    envelopes = [(float(m), float(s)) for m, s in envelopes]
    R = max(abs(m) + s for m, s in envelopes)
    while sum(_gauss_tail(m, s, b, R) for m, s in envelopes) > tol:
        R *= 1.25
    brk = sorted({float(v) for v in (points or [])} | {m for m, _ in envelopes})
    brk = [v for v in brk if -R < v < R]

    def f(x):
        return (1.0 + b * x * x) * abs(p(x) - q(x))

    val, err = quad(f, -R, R, points=brk or None, limit=2000, epsabs=tol, epsrel=1e-12)
    if not err <= max(100 * tol, 1e-9 * abs(val)):
        raise AccuracyError(f"rho_b quadrature did not converge (error {err})", estimate=val,
                            error=err)
    return float(val)


def tv_gaussian_shift_1d(shift, std=1.0):
    """Total variation ``sup_A |P(A) - Q(A)|`` between ``N(0, s^2)`` and ``N(shift, s^2)``."""
    return float(2.0 * ndtr(abs(shift) / (2.0 * std)) - 1.0)


def w2_gaussian_1d(m1, s1, m2, s2):
    """``W2`` between ``N(m1, s1^2)`` and ``N(m2, s2^2)``."""
    return math.hypot(m1 - m2, s1 - s2)
