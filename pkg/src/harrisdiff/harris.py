"""Explicit Harris-stability constants and the global error bound.

Reverse times ``s < t`` index backward intervals; forward times are
``T - s`` and ``T - t``.  With ``V(x) = ||x||^2`` the backward process
satisfies the drift inequality ``E[V(X_t) | X_s = x] <= gamma V(x) + beta``,
a minorization on the ball ``{V <= r^2}`` with constant ``epsilon``, and hence
a contraction ``alpha_bar`` in the weighted total variation ``rho_b``.
"""

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.integrate import solve_ivp

from harrisdiff.errors import AccuracyError, ConstraintError, DomainError, ShapeError
from harrisdiff.target import (
    density_sup_norm,
    isotropic_gaussian_moment,
    kl_gaussian,
    kl_to_isotropic,
    moment,
)

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dissipativity:
    """``<s_0(x), x> <= -a0 ||x||^2 + b0`` in dimension ``dim``."""

    a0: float
    b0: float
    dim: int

    def __post_init__(self):
        if not self.a0 > 0:
            raise ConstraintError("a0 must be positive")
        if not self.b0 >= 0:
            raise ConstraintError("b0 must be nonnegative")
        if int(self.dim) < 1:
            raise ConstraintError("dim must be >= 1")

    def require(self, schedule):
        if not self.a0 > schedule.alpha / 2:
            raise ConstraintError(f"need a0 > alpha/2, got a0={self.a0}, alpha={schedule.alpha}")


def propagate_dissipativity(d0, schedule, t):
    """Dissipativity constants ``(a_t, b_t)`` of the forward score at time ``t``."""
    d0.require(schedule)
    fm = schedule.forward_moments(t)
    if schedule.is_ve:
        den = 1.0 + 2.0 * d0.a0 * fm.var
        return d0.a0 / den, (d0.b0 + d0.dim) / den
    a = schedule.alpha
    den = a * fm.m**2 + 2.0 * d0.a0 * (1.0 - fm.m**2)
    return d0.a0 * a / den, (d0.b0 + d0.dim) * fm.m**2 * a / den


@dataclass(frozen=True)
class DriftPair:
    """``E[||X_t||^2 | X_s = x] <= gamma ||x||^2 + beta_const``."""

    gamma: float
    beta_const: float
    one_minus_gamma: float = None

    def __post_init__(self):
        if self.one_minus_gamma is None:
            object.__setattr__(self, "one_minus_gamma", 1.0 - self.gamma)
        if not (0 < self.gamma <= 1 and self.beta_const >= 0):
            raise ConstraintError(f"invalid drift pair {self}")


def _check_interval(schedule, s, t):
    if not 0 <= s < t <= schedule.horizon:
        raise DomainError(f"need 0 <= s < t <= T, got s={s}, t={t}")


def _interval_moments(schedule, s, t):
    """Forward quantities for the backward interval ``[s, t]``."""
    T = schedule.horizon
    outer = schedule.forward_moments(T - t)  # X_{T-t} given X_0
    cond = schedule.transition(T - t, T - s)  # X_{T-s} given X_{T-t}
    integral = schedule.beta_integral(T - t, T - s)
    return outer, cond, integral


def drift_pair(schedule, d0, s, t, ell=2):
    """Lyapunov drift pair of the backward kernel on reverse interval ``[s, t]``.

    With ``D_v = m_{0|T-v}^2 + 2 a0 var_{0|T-v}`` (``m = 1`` for VE) the rate
    integral telescopes: ``gamma = D_t / D_s`` and

        beta = 2 (b0 + d) (var_{0|T-s} - var_{0|T-t}) / D_s
               + d D_t log(m_{0|T-t}^2 D_s / (m_{0|T-s}^2 D_t)) / (2 a0).

    ``ell > 2`` falls back to quadrature (see :func:`drift_pair_quadrature`).
    """
    if ell != 2:
        return drift_pair_quadrature(schedule, d0, s, t, ell)
    _check_interval(schedule, s, t)
    d0.require(schedule)
    a0, b0, d = d0.a0, d0.b0, d0.dim
    alpha = schedule.alpha
    outer, cond, integral = _interval_moments(schedule, s, t)
    # var_{0|T-s} - var_{0|T-t} = m_{0|T-t}^2 var_{T-t|T-s}
    dvar = outer.m**2 * cond.var
    d_t = outer.m**2 + 2.0 * a0 * outer.var
    gap = (2.0 * a0 - alpha) * dvar  # D_s - D_t
    d_s = d_t + gap
    gamma = d_t / d_s
    beta = 2.0 * (b0 + d) * dvar / d_s + d * d_t * (2.0 * alpha * integral + math.log1p(gap / d_t)) / (2.0 * a0)
    return DriftPair(gamma, beta, gap / d_s)


def drift_pair_quadrature(schedule, d0, s, t, ell=2):
    """Drift pair from the defining integrals, by adaptive integration.

    For ``ell = 2`` the rate and offset are ``2 beta(T-v) (2 a_{T-v} - alpha)``
    and ``2 beta(T-v) (2 b_{T-v} + d)``.  For ``ell > 2`` the offset term
    ``b ||x||^(ell-2)`` is absorbed with Young's inequality using
    ``eta = a ell / (4 (ell - 2) b)``, leaving rate ``a / 2`` and offset
    ``(2 / ell) eta^(-(ell-2)/2) b``.
    """
    _check_interval(schedule, s, t)
    d0.require(schedule)
    if ell < 2 or int(ell) != ell:
        raise DomainError("ell must be an integer >= 2")
    T, alpha, d = schedule.horizon, schedule.alpha, d0.dim

    def coeffs(v):
        bb = schedule.beta_at(T - v)
        a_v, b_v = propagate_dissipativity(d0, schedule, T - v)
        rate = ell * bb * (2.0 * a_v - alpha)
        off = ell * bb * (2.0 * b_v + ell - 2 + d)
        if ell == 2:
            return rate, off
        if off <= 0:
            return 0.5 * rate, 0.0
        eta = rate * ell / (4.0 * (ell - 2) * off)
        return 0.5 * rate, (2.0 / ell) * eta ** (-(ell - 2) / 2.0) * off

    # R' = rate, J' = exp(R) offset on [s, t]; then gamma = exp(-R(t)) and
    # beta = exp(-R(t)) J(t) = int_s^t exp(-int_u^t rate) offset(u) du
    def rhs(v, y):
        rate, off = coeffs(v)
        return [rate, math.exp(y[0]) * off]

    # higher moments have sharply varying offsets near a_t -> alpha/2; a looser
    # tolerance keeps the diagnostic cheap
    rtol = 1e-13 if ell == 2 else 1e-8
    sol = solve_ivp(rhs, (s, t), [0.0, 0.0], method="DOP853", rtol=rtol, atol=1e-16)
    if not sol.success:
        raise AccuracyError(f"drift quadrature failed: {sol.message}")
    total, acc = sol.y[0, -1], sol.y[1, -1]
    return DriftPair(math.exp(-total), math.exp(-total) * acc, -math.expm1(-total))


def small_set_radius(drift):
    """Critical squared radius ``r_c^2 = 2 beta / (1 - gamma)``."""
    if not drift.one_minus_gamma > 0:
        raise DomainError("gamma = 1: degenerate interval has no small set")
    return 2.0 * drift.beta_const / drift.one_minus_gamma


def ve_small_set_radius(schedule, d0, s, t):
    """VE-only simplified form of ``r_c^2``.

    With ``E_v = 1 + 2 a0 var_{0|T-v}`` and ``dv = var_{0|T-s} - var_{0|T-t}``:
    ``r_c^2 = 2 (b0 + d) / a0 + d E_s E_t log(E_s / E_t) / (2 a0^2 dv)``.
    """
    if not schedule.is_ve:
        raise DomainError("the simplified small-set radius is VE-only")
    _check_interval(schedule, s, t)
    a0, b0, d = d0.a0, d0.b0, d0.dim
    T = schedule.horizon
    v_s = schedule.forward_moments(T - s).var
    v_t = schedule.forward_moments(T - t).var
    dv = schedule.transition(T - t, T - s).var
    e_s, e_t = 1.0 + 2.0 * a0 * v_s, 1.0 + 2.0 * a0 * v_t
    return 2.0 * (b0 + d) / a0 + d * e_s * e_t * math.log1p(2.0 * a0 * dv / e_t) / (2.0 * a0**2 * dv)


def _log_gauss_at(x, cov):
    """``log N(x; 0, cov)``."""
    L = np.linalg.cholesky(cov)
    y = np.linalg.solve(L, x)
    return float(-0.5 * y @ y - np.sum(np.log(np.diag(L))) - 0.5 * len(x) * _LOG2PI)


def minorization_window(schedule, s, t):
    """Variance ``c`` of the Gaussian window in the minorization constant."""
    outer, cond, _ = _interval_moments(schedule, s, t)
    return (cond.var + 2.0 * outer.var * cond.m**2) / (2.0 * outer.m**2 * cond.m**2)


def minorization_z(target, c):
    """``Z = E[N(X_0; 0, c I)]`` under the target, in closed form.

    Each component contributes ``w_i N(mu_i; 0, Sigma_i + c I)``.
    """
    w, mu, cov = target.components()
    eye = np.eye(target.dim)
    logs = np.array([_log_gauss_at(m, S + c * eye) for m, S in zip(mu, cov)])
    return float(w @ np.exp(logs))


def log_minorization_epsilon(target, schedule, s, t, r_sq):
    """Natural log of the minorization constant (see :func:`minorization_epsilon`)."""
    _check_interval(schedule, s, t)
    if not r_sq > 0:
        raise DomainError("r_sq must be positive")
    d = target.dim
    T = schedule.horizon
    outer, cond, _ = _interval_moments(schedule, s, t)
    top = schedule.forward_moments(T - s)
    sup, _ = density_sup_norm(target)
    log_pref = 0.5 * d * math.log(math.pi * top.var) - d * math.log(cond.m * outer.m)
    log_peak = 0.5 * d * math.log(2.0 * math.pi * top.var) - d * math.log(top.m) + math.log(sup)
    log_z = math.log(minorization_z(target, minorization_window(schedule, s, t)))
    return log_pref - max(log_peak, 0.0) - r_sq / cond.var + log_z


def minorization_epsilon(target, schedule, s, t, r_sq):
    """Doeblin constant of the backward kernel on ``{||x||^2 <= r_sq}``.

        eps = (pi var_{0|T-s})^(d/2) / (m_{T-t|T-s} m_{0|T-t})^d
              / max{(2 pi var_{0|T-s})^(d/2) m_{0|T-s}^(-d) ||p||_inf, 1}
              * exp(-r_sq / var_{T-t|T-s}) * Z

    with ``Z`` from :func:`minorization_z` at the window variance of
    :func:`minorization_window`.  Values at or above 1 are clamped below 1
    with a warning; values below the float range underflow to 0.
    """
    log_eps = log_minorization_epsilon(target, schedule, s, t, r_sq)
    if log_eps >= 0:
        warnings.warn(f"minorization constant exp({log_eps}) >= 1 clamped", RuntimeWarning)
        return math.nextafter(1.0, 0.0)
    return math.exp(log_eps)


class Contraction(NamedTuple):
    b_weight: float
    alpha_bar: float


def contraction_detail(drift, epsilon, r_sq, alpha0=None, eta0=None):
    """Weight ``b`` and factor ``alpha_bar`` with the tuning actually used.

    ``alpha_bar = min(1 - (eps - alpha0), (2 + r^2 b eta0) / (2 + r^2 b))``
    with ``b = alpha0 / beta``.  Returns a dict that also carries
    ``one_minus_alpha_bar`` computed without cancellation.
    """
    if alpha0 is None:
        alpha0 = 0.5 * epsilon
    lo = drift.gamma + 2.0 * drift.beta_const / r_sq
    if not lo < 1.0:
        raise ConstraintError(f"r_sq={r_sq} does not exceed r_c^2; eta0 interval is empty")
    if eta0 is None:
        eta0 = 0.5 * (lo + 1.0)
        one_minus_eta0 = 0.5 * (drift.one_minus_gamma - 2.0 * drift.beta_const / r_sq)
    else:
        if not lo < eta0 < 1.0:
            raise ConstraintError(f"eta0 must lie in ({lo}, 1)")
        one_minus_eta0 = 1.0 - eta0
    if epsilon > 0 and not 0 < alpha0 < epsilon:
        raise ConstraintError("alpha0 must lie in (0, epsilon)")
    b = alpha0 / drift.beta_const
    rb = r_sq * b
    gap = max(epsilon - alpha0, rb * one_minus_eta0 / (2.0 + rb))
    alpha_bar = min(1.0 - (epsilon - alpha0), (2.0 + rb * eta0) / (2.0 + rb))
    return {
        "b_weight": b,
        "alpha_bar": alpha_bar,
        "one_minus_alpha_bar": gap,
        "alpha0": alpha0,
        "eta0": eta0,
    }


def contraction(drift, epsilon, r_sq, alpha0=None, eta0=None):
    """``(b, alpha_bar)``; defaults ``alpha0 = eps / 2`` and the midpoint ``eta0``."""
    out = contraction_detail(drift, epsilon, r_sq, alpha0, eta0)
    return Contraction(out["b_weight"], out["alpha_bar"])


def mixing_kl(target, schedule):
    """``KL(target || pi_infty)`` for VP; ``(value, exact)``."""
    if schedule.is_ve:
        raise DomainError("the KL mixing factor is defined for VP schedules")
    return kl_to_isotropic(target, 1.0 / schedule.alpha)


def mixing_lambda(target, schedule):
    """Initialization factor ``Lambda(T)``.

    VE: ``||X_0||_{L2} / (2 sqrt(int_0^T beta))``.  VP:
    ``sqrt(KL(target || pi_infty)) exp(-alpha int_0^T beta)``; the KL is an
    upper bound by convexity for mixtures.
    """
    total = schedule.beta_integral(0.0, schedule.horizon)
    if schedule.is_ve:
        return 0.5 * math.sqrt(moment(target, schedule, 0.0, 2)) / math.sqrt(total)
    kl, _ = mixing_kl(target, schedule)
    return math.sqrt(max(kl, 0.0)) * math.exp(-schedule.alpha * total)


def kl_decay_bound(target, schedule):
    """VP bound ``KL(target || pi_infty) exp(-2 alpha int_0^T beta)`` on ``KL(p_T || pi_infty)``."""
    kl, _ = mixing_kl(target, schedule)
    return kl * math.exp(-2.0 * schedule.alpha * schedule.beta_integral(0.0, schedule.horizon))


def kl_forward_marginal(target, schedule):
    """Exact ``KL(p_T || pi_infty)`` for a Gaussian target under VP."""
    if target.n_components != 1:
        raise DomainError("closed-form marginal KL needs a Gaussian target")
    T = schedule.horizon
    fm = schedule.forward_moments(T)
    d = target.dim
    cov_t = fm.m**2 * target.covs[0] + fm.var * np.eye(d)
    return kl_gaussian(fm.m * target.means[0], cov_t, np.zeros(d), np.eye(d) / schedule.alpha)


def cmix(target, schedule, b_weight):
    """``1/sqrt(2) + b sqrt(2 (E ||X_T||^4 + E ||X_inf||^4))``."""
    if b_weight < 0:
        raise DomainError("b_weight must be nonnegative")
    m_t = moment(target, schedule, schedule.horizon, 4)
    m_inf = isotropic_gaussian_moment(target.dim, schedule.stationary_var(), 4)
    return 1.0 / math.sqrt(2.0) + b_weight * math.sqrt(2.0 * (m_t + m_inf))


@dataclass
class IntervalRecord:
    s: float
    t: float
    gamma: float
    beta_const: float
    r_c_sq: float
    r_sq: float
    log_epsilon: float
    epsilon: float
    alpha0: float
    eta0: float
    b_weight: float
    log_b_weight: float
    alpha_bar: float
    one_minus_alpha_bar: float
    log_one_minus_alpha_bar: float


@dataclass
class HarrisConstants:
    """Per-interval records and the uniform constants over a grid.

    Minorization constants of long or early intervals routinely fall below
    the float range; the ``log_*`` fields stay finite in that case.
    """

    intervals: list
    alpha_star: float
    one_minus_alpha_star: float
    b_star: float
    LambdaT: float
    Cmix: float
    log_one_minus_alpha_star: float = None
    bound_value: float = None
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        out["intervals"] = [asdict(r) for r in self.intervals]
        return out


def harris_constants(target, schedule, grid, d0, r_sq_factor=2.0, alpha0_fraction=0.5,
                     eta0=None):
    """Per-interval constants on ``grid`` and the uniform choice over intervals.

    ``r^2 = r_sq_factor * r_c^2`` and ``alpha0 = alpha0_fraction * eps`` on
    each interval.  ``alpha_star`` is the largest ``alpha_bar`` and ``b_star``
    the smallest ``b``.
    """
    if not r_sq_factor > 1:
        raise ConstraintError("r_sq_factor must exceed 1")
    if not 0 < alpha0_fraction < 1:
        raise ConstraintError("alpha0_fraction must lie in (0, 1)")
    records = []
    for s, t in zip(grid.times[:-1], grid.times[1:]):
        s, t = float(s), float(t)
        dp = drift_pair(schedule, d0, s, t)
        rc = small_set_radius(dp)
        r_sq = r_sq_factor * rc
        log_eps = log_minorization_epsilon(target, schedule, s, t, r_sq)
        eps = minorization_epsilon(target, schedule, s, t, r_sq)
        det = contraction_detail(dp, eps, r_sq, alpha0_fraction * eps if eps > 0 else 0.0, eta0)
        # same quantities in log space, valid when eps underflows
        log_b = math.log(alpha0_fraction) + log_eps - math.log(dp.beta_const)
        log_rb = math.log(r_sq) + log_b
        one_minus_eta0 = 1.0 - det["eta0"] if eta0 is not None else \
            0.5 * (dp.one_minus_gamma - 2.0 * dp.beta_const / r_sq)
        log_gap = max(
            log_eps + math.log1p(-alpha0_fraction),
            log_rb - math.log(2.0) - math.log1p(0.5 * math.exp(log_rb)) + math.log(one_minus_eta0),
        )
        records.append(IntervalRecord(
            s=s, t=t, gamma=dp.gamma, beta_const=dp.beta_const, r_c_sq=rc, r_sq=r_sq,
            log_epsilon=log_eps, epsilon=eps, alpha0=det["alpha0"], eta0=det["eta0"],
            b_weight=det["b_weight"], log_b_weight=log_b, alpha_bar=det["alpha_bar"],
            one_minus_alpha_bar=det["one_minus_alpha_bar"], log_one_minus_alpha_bar=log_gap,
        ))
    alpha_star = max(r.alpha_bar for r in records)
    gap_star = min(r.one_minus_alpha_bar for r in records)
    log_gap_star = min(r.log_one_minus_alpha_bar for r in records)
    b_star = min(r.b_weight for r in records)
    _, sup_exact = density_sup_norm(target)
    notes = {
        "density_sup_norm": "exact" if sup_exact else "upper bound",
        "tuning": {"r_sq_factor": r_sq_factor, "alpha0_fraction": alpha0_fraction,
                   "eta0": "midpoint" if eta0 is None else eta0},
    }
    if not schedule.is_ve:
        notes["kl"] = "exact" if mixing_kl(target, schedule)[1] else "convexity upper bound"
    return HarrisConstants(
        intervals=records,
        alpha_star=alpha_star,
        one_minus_alpha_star=gap_star,
        b_star=b_star,
        LambdaT=mixing_lambda(target, schedule),
        Cmix=cmix(target, schedule, b_star),
        log_one_minus_alpha_star=log_gap_star,
        notes=notes,
    )


def _discount(alpha_star, gap, n):
    if alpha_star < 1.0:
        return alpha_star**n
    # alpha_star rounds to 1 but the gap is still positive
    return math.exp(n * math.log1p(-gap))


def assemble_bound(grid, constants, local_errors):
    """Global bound on ``rho_{b*}`` between the target and the chain output.

    ``alpha*^N Lambda Cmix + sum_{k=1}^N alpha*^(N-k) (D_k Cdisc_{k-1}
    + sqrt(D_k) Cnet_{k-1} err_{k-1})`` where ``D_k`` is the integrated noise
    of the step from ``t_{k-1}`` to ``t_k``.  ``local_errors`` is a list of
    ``(Cdisc, Cnet, err)`` triples, one per step, supplied by the caller.
    """
    n = grid.n_steps
    if len(local_errors) != n or len(constants.intervals) not in (0, n):
        raise ShapeError(f"expected {n} local error triples, got {len(local_errors)}")
    a, gap = constants.alpha_star, constants.one_minus_alpha_star
    total = _discount(a, gap, n) * constants.LambdaT * constants.Cmix
    for k in range(1, n + 1):
        c_disc, c_net, err = (float(v) for v in local_errors[k - 1])
        delta = float(grid.deltas[k - 1])
        total += _discount(a, gap, n - k) * (delta * c_disc + math.sqrt(delta) * c_net * err)
    return total
