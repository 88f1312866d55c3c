"""Analytic targets: Gaussians and Gaussian mixtures.

A target pushed through the forward process stays a mixture of Gaussians:
component ``i`` at forward time ``t`` has mean ``m mu_i`` and covariance
``m^2 Sigma_i + var I``.  Scores, densities and moments below are exact
consequences of that representation.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from harrisdiff.errors import DomainError
from harrisdiff.rng import as_generator

_LOG2PI = np.log(2.0 * np.pi)
# responsibilities this far below the leading component are flushed to zero
_FLUSH = -700.0


def _as_spd(cov, name="cov"):
    cov = np.array(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError(f"{name} must be a square matrix")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise DomainError(f"{name} is not symmetric")
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] <= 0:
        raise DomainError(f"{name} is not positive definite")
    return cov


class TimeMarginal:
    """Gaussian mixture with precomputed Cholesky factors."""

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        self.log_weights = np.log(self.weights)
        self._chol = [np.linalg.cholesky(c) for c in self.covs]
        self._logdet = np.array([2.0 * np.sum(np.log(np.diag(L))) for L in self._chol])

    @property
    def dim(self):
        return self.means.shape[1]

    def _component_terms(self, x):
        """Per-component log densities and precision-weighted residuals."""
        d = self.dim
        logp = np.empty((x.shape[0], len(self.weights)))
        resid = np.empty((len(self.weights),) + x.shape)
        for i, L in enumerate(self._chol):
            diff = x - self.means[i]
            y = solve_triangular(L, diff.T, lower=True)
            logp[:, i] = -0.5 * np.sum(y * y, axis=0) - 0.5 * self._logdet[i] - 0.5 * d * _LOG2PI
            resid[i] = solve_triangular(L.T, y, lower=False).T
        return logp, resid

    def log_density(self, x):
        x, single = _batch(x, self.dim)
        logp, _ = self._component_terms(x)
        out = logsumexp(logp + self.log_weights, axis=1)
        return float(out[0]) if single else out

    def density(self, x):
        return np.exp(self.log_density(x))

    def score(self, x):
        """Gradient of the log density."""
        x, single = _batch(x, self.dim)
        logp, resid = self._component_terms(x)
        logw = logp + self.log_weights
        rel = logw - np.max(logw, axis=1, keepdims=True)
        resp = np.where(rel < _FLUSH, 0.0, np.exp(rel))
        resp /= resp.sum(axis=1, keepdims=True)
        out = -np.einsum("ni,ind->nd", resp, resid)
        return out[0] if single else out


def _batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise DomainError(f"expected points of dimension {d}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite input point")
    return x, single


class GmmTarget:
    """Mixture ``sum_i w_i N(mu_i, Sigma_i)``."""

    def __init__(self, weights, means, covs, metadata=None):
        weights = np.asarray(weights, dtype=float).ravel()
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be positive and sum to 1")
        if means.shape[0] != len(weights) or len(covs) != len(weights):
            raise DomainError("weights, means and covs must have the same length")
        self.weights = weights
        self.means = means
        self.covs = np.stack([_as_spd(c, f"covs[{i}]") for i, c in enumerate(covs)])
        if self.covs.shape[1] != means.shape[1]:
            raise DomainError("covariance and mean dimensions differ")
        self.metadata = dict(metadata or {})

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def components(self):
        return self.weights, self.means, self.covs

    def marginal(self, schedule, t):
        """Law of ``X_t`` when ``X_0`` follows this target."""
        fm = schedule.forward_moments(t)
        eye = np.eye(self.dim)
        w, mu, cov = self.components()
        return TimeMarginal(w, fm.m * mu, fm.m**2 * cov + fm.var * eye)

    def score(self, schedule, t, x):
        return self.marginal(schedule, t).score(x)

    def log_density(self, x):
        w, mu, cov = self.components()
        return TimeMarginal(w, mu, cov).log_density(x)

    def sample(self, n, rng=None):
        if n < 1:
            raise DomainError("n must be >= 1")
        rng = as_generator(rng)
        w, mu, cov = self.components()
        labels = rng.choice(len(w), size=n, p=w) if len(w) > 1 else np.zeros(n, dtype=int)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(len(w)):
            sel = labels == i
            L = np.linalg.cholesky(cov[i])
            out[sel] = mu[i] + z[sel] @ L.T
        return out

    def mean_vector(self):
        w, mu, _ = self.components()
        return w @ mu

    def covariance(self):
        w, mu, cov = self.components()
        m = w @ mu
        second = np.einsum("i,ijk->jk", w, cov) + np.einsum("i,ij,ik->jk", w, mu, mu)
        c = second - np.outer(m, m)
        return 0.5 * (c + c.T)

    def to_dict(self):
        out = {
            "type": "gmm",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }
        if self.metadata:
            out["metadata"] = self.metadata
        return out


class GaussianTarget(GmmTarget):
    """Single Gaussian ``N(mu, Sigma)``; scores use a shared eigenbasis."""

    def __init__(self, mean, cov, metadata=None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = _as_spd(np.atleast_2d(cov))
        if cov.shape[0] != mean.shape[0]:
            raise DomainError("mean and covariance dimensions differ")
        super().__init__([1.0], mean[None, :], [cov], metadata)
        self.mean = mean
        self.cov = self.covs[0]
        self.eigvals, self.eigvecs = np.linalg.eigh(self.cov)

    def marginal_cov(self, schedule, t):
        """``Sigma_t = m^2 Sigma + var I``."""
        fm = schedule.forward_moments(t)
        return fm.m**2 * self.cov + fm.var * np.eye(self.dim)

    def precision(self, schedule, t):
        fm = schedule.forward_moments(t)
        lam = fm.m**2 * self.eigvals + fm.var
        return (self.eigvecs / lam) @ self.eigvecs.T

    def score(self, schedule, t, x):
        x, single = _batch(x, self.dim)
        fm = schedule.forward_moments(t)
        out = -(x - fm.m * self.mean) @ self.precision(schedule, t)
        return out[0] if single else out

    def to_dict(self):
        out = {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}
        if self.metadata:
            out["metadata"] = self.metadata
        return out


def score_at(target, schedule, t, x):
    """Exact score of the forward marginal at forward time ``t``."""
    return target.score(schedule, t, x)


def sample(target, n, rng=None):
    return target.sample(n, rng)


def density_sup_norm(target):
    """Sup norm of the target density, or an upper bound for mixtures.

    Returns ``(value, exact)``: ``exact`` is False when ``value`` is the
    component-wise bound ``sum_i w_i (2 pi)^(-d/2) det(Sigma_i)^(-1/2)``.
    """
    w, _, cov = target.components()
    d = target.dim
    logdets = np.array([np.linalg.slogdet(c)[1] for c in cov])
    peaks = np.exp(-0.5 * d * _LOG2PI - 0.5 * logdets)
    return float(w @ peaks), target.n_components == 1


def _gaussian_moment(mean, cov, order):
    mm = float(mean @ mean)
    tr = float(np.trace(cov))
    if order == 2:
        return mm + tr
    return (mm + tr) ** 2 + 2.0 * float(np.sum(cov * cov)) + 4.0 * float(mean @ cov @ mean)


def moment(target, schedule, t, order):
    """``E ||X_t||^order`` for order 2 or 4 under the time-t marginal."""
    if order not in (2, 4):
        raise DomainError(f"moment order must be 2 or 4, got {order}")
    fm = schedule.forward_moments(t)
    w, mu, cov = target.components()
    eye = np.eye(target.dim)
    return float(
        sum(
            wi * _gaussian_moment(fm.m * m, fm.m**2 * c + fm.var * eye, order)
            for wi, m, c in zip(w, mu, cov)
        )
    )


def isotropic_gaussian_moment(d, var, order):
    """``E ||X||^order`` for ``X ~ N(0, var I_d)``."""
    if order == 2:
        return d * var
    if order == 4:
        return d * (d + 2) * var**2
    raise DomainError(f"moment order must be 2 or 4, got {order}")


def kl_gaussian(mean1, cov1, mean2, cov2):
    """``KL(N(mean1, cov1) || N(mean2, cov2))``."""
    mean1, mean2 = np.atleast_1d(mean1), np.atleast_1d(mean2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    d = len(mean1)
    c2 = cho_factor(cov2)
    diff = mean2 - mean1
    tr = np.trace(cho_solve(c2, cov1))
    quad = diff @ cho_solve(c2, diff)
    logdet2 = 2.0 * np.sum(np.log(np.diag(c2[0])))
    logdet1 = np.linalg.slogdet(cov1)[1]
    return float(0.5 * (tr + quad - d + logdet2 - logdet1))


def kl_to_isotropic(target, var):
    """``KL(target || N(0, var I))``; an upper bound via convexity for mixtures.

    Returns ``(value, exact)``.
    """
    w, mu, cov = target.components()
    zero, ref = np.zeros(target.dim), var * np.eye(target.dim)
    val = sum(wi * kl_gaussian(m, c, zero, ref) for wi, m, c in zip(w, mu, cov))
    return float(val), target.n_components == 1


def dissipativity_check(target, n_probe=10000, radius=10.0, rng=None, a0_fraction=None,
                        mode="certified"):
    """Constants ``(a0, b0)`` with ``<s_0(x), x> <= -a0 ||x||^2 + b0``.

    With ``P_i = Sigma_i^{-1}`` and ``lam = min_i lambda_min(P_i)``, take
    ``a0 = a0_fraction * lam``.  For a centred Gaussian the exact pair
    ``(lam, 0)`` is returned.  Otherwise each component term
    ``-x'P_i x + (P_i mu_i)'x + a0 ||x||^2`` has the closed-form maximum
    ``(P_i mu_i)' (P_i - a0 I)^{-1} (P_i mu_i) / 4``; since the score is a
    responsibility-weighted average of component terms, the largest of these
    is a valid ``b0`` (``mode="certified"``, exact for one component).

    ``mode="empirical"`` instead reports the largest value of
    ``<s_0(x), x> + a0 ||x||^2`` found on ``n_probe`` points spread over
    spheres of radius up to ``radius``, refined by local ascent.  It is an
    estimate, not a certificate.
    """
    w, mu, cov = target.components()
    d = target.dim
    precisions = [np.linalg.inv(c) for c in cov]
    lam = min(np.linalg.eigvalsh(p)[0] for p in precisions)
    centred = np.allclose(mu, 0.0, atol=0.0)
    if a0_fraction is None:
        a0_fraction = 1.0 if centred and target.n_components == 1 else 0.5
    if not 0 < a0_fraction <= 1:
        raise DomainError("a0_fraction must lie in (0, 1]")
    a0 = a0_fraction * lam
    if centred and target.n_components == 1:
        return float(a0), 0.0
    if a0_fraction == 1.0:
        raise DomainError("a0_fraction = 1 gives an infinite b0 for a non-centred target")
    if mode == "certified":
        b0 = 0.0
        for p, m in zip(precisions, mu):
            v = p @ m
            b0 = max(b0, 0.25 * float(v @ np.linalg.solve(p - a0 * np.eye(d), v)))
        return float(a0), b0
    if mode != "empirical":
        raise DomainError(f"unknown mode {mode!r}")
    rng = as_generator(rng)
    margin = TimeMarginal(w, mu, cov)

    def excess(x):
        x = np.atleast_2d(x)
        return np.sum(margin.score(x) * x, axis=1) + a0 * np.sum(x * x, axis=1)

    dirs = rng.standard_normal((n_probe, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * rng.uniform(0.0, 1.0, n_probe) ** (1.0 / d)
    probes = np.concatenate([dirs * radii[:, None], mu])
    vals = excess(probes)
    best = float(vals.max())
    for i in np.argsort(vals)[-5:]:
        x = probes[i].copy()
        step = 1e-2
        fx = float(excess(x)[0])
        for _ in range(500):
            # gradient of <s,x> + a0|x|^2 by central differences
            h = 1e-6 * max(1.0, np.linalg.norm(x))
            g = np.array([(excess(x + h * e)[0] - excess(x - h * e)[0]) / (2 * h)
                          for e in np.eye(d)])
            y = x + step * g
            fy = float(excess(y)[0])
            if fy > fx:
                x, fx = y, fy
                step *= 1.2
            else:
                step *= 0.5
                if step < 1e-10:
                    break
        best = max(best, fx)
    return float(a0), max(best, 0.0)


def gaussian_preset(name, d=50, mean=1.0):
    """Gaussian targets of the forgetting experiments.

    ``isotropic``: ``Sigma = 0.1 I``; ``heteroscedastic``: variance 1 on the
    first 5 coordinates and 1e-3 elsewhere; ``correlated``:
    ``Sigma_jk = 1 / sqrt(|j - k| + 1)``.  The mean is ``mean * 1_d``.
    """
    mu = np.full(d, float(mean))
    if name == "isotropic":
        cov = 0.1 * np.eye(d)
    elif name == "heteroscedastic":
        diag = np.full(d, 1e-3)
        diag[: min(5, d)] = 1.0
        cov = np.diag(diag)
    elif name == "correlated":
        idx = np.arange(d)
        cov = 1.0 / np.sqrt(np.abs(idx[:, None] - idx[None, :]) + 1.0)
    else:
        raise DomainError(f"unknown Gaussian preset {name!r}")
    return GaussianTarget(mu, cov, metadata={"preset": name})


_DIAG_RULES = ("repeat", "extend")


def build_benchmark_gmm(seed, d=50, diag_rule="repeat"):
    """25-component mixture on a 5x5 grid of means.

    The first two mean coordinates sweep ``[-10, 10]^2`` on a 5x5 grid and
    the rest are zero.  Weights are normalized chi-square(3) draws.  Each
    covariance is ``U' D U`` with ``U`` from the SVD of a Gaussian matrix.
    ``D`` holds ``1, 1/2, ..., 1/25``: ``diag_rule="repeat"`` tiles that
    block to length ``d``; ``"extend"`` continues the harmonic sequence to
    ``1/d``.
    """
    if d < 2:
        raise DomainError("the grid mixture needs d >= 2")
    if diag_rule not in _DIAG_RULES:
        raise DomainError(f"diag_rule must be one of {_DIAG_RULES}")
    rng = as_generator(seed)
    axis = np.linspace(-10.0, 10.0, 5)
    means = np.zeros((25, d))
    means[:, 0] = np.repeat(axis, 5)
    means[:, 1] = np.tile(axis, 5)
    raw = rng.chisquare(3, size=25)
    weights = raw / raw.sum()
    weights[-1] = 1.0 - weights[:-1].sum()
    if diag_rule == "repeat":
        diag = np.resize(1.0 / np.arange(1, 26), d)
    else:
        diag = 1.0 / np.arange(1, d + 1)
    covs = []
    for _ in range(25):
        _, _, vt = np.linalg.svd(rng.standard_normal((d, d)))
        c = vt.T @ (diag[:, None] * vt)
        covs.append(0.5 * (c + c.T))
    meta = {"builder": "benchmark_gmm", "seed": int(seed), "d": d, "diag_rule": diag_rule}
    return GmmTarget(weights, means, covs, metadata=meta)


def target_from_dict(obj):
    """Build a target from its JSON form."""
    kind = obj.get("type")
    try:
        if kind == "gaussian":
            return GaussianTarget(obj["mean"], obj["cov"], obj.get("metadata"))
        if kind == "gmm":
            return GmmTarget(obj["weights"], obj["means"], obj["covs"], obj.get("metadata"))
        if kind == "benchmark_gmm":
            return build_benchmark_gmm(int(obj["seed"]), int(obj.get("d", 50)),
                                       obj.get("diag_rule", "repeat"))
        if kind == "gaussian_preset":
            return gaussian_preset(obj["name"], int(obj.get("d", 50)), float(obj.get("mean", 1.0)))
    except KeyError as exc:
        raise DomainError(f"target spec is missing key {exc}") from None
    raise DomainError(f"unknown target type {kind!r}")
