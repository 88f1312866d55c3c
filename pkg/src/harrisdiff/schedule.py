"""Forward noise schedules and reverse-time grids.

The forward process is ``dX_t = -alpha * beta(t) X_t dt + sqrt(2 beta(t)) dW_t``
on ``[0, T]``.  ``alpha == 0`` gives a variance-exploding (VE) process and
``alpha > 0`` a variance-preserving (VP) one with stationary law
``N(0, I / alpha)``.

All public functions take *forward* times.  Grids store reverse times
``0 = t_0 < ... < t_N = T``; reverse time ``t`` corresponds to forward time
``T - t``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from harrisdiff.errors import DomainError

_SLACK = 1e-12


@dataclass(frozen=True)
class LinearBeta:
    """Affine schedule ``beta(t) = beta_min + (t / T) (beta_max - beta_min)``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0


@dataclass(frozen=True)
class KarrasVE:
    """Variance-exploding schedule with Karras sigma interpolation.

    ``sigma(t) = (sigma_min^(1/rho) + (t/T)(sigma_max^(1/rho) - sigma_min^(1/rho)))^rho``
    increases from ``sigma_min`` at ``t = 0`` to ``sigma_max`` at ``t = T`` and
    ``beta = sigma * sigma'``.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 3.0
    horizon: float = 1.0


@dataclass(frozen=True)
class ForwardMoments:
    """Scaling ``m`` and variance ``var`` of ``X_b`` given ``X_a``."""

    m: float
    var: float


class Schedule:
    """Noise schedule ``(alpha, beta)`` with closed-form integrals."""

    def __init__(self, alpha, kind):
        alpha = float(alpha)
        if not np.isfinite(alpha) or alpha < 0:
            raise DomainError(f"alpha must be a nonnegative real, got {alpha}")
        if isinstance(kind, LinearBeta):
            if kind.beta_min < 0 or kind.beta_max < kind.beta_min:
                raise DomainError("LinearBeta needs 0 <= beta_min <= beta_max")
            if kind.beta_max <= 0:
                raise DomainError("LinearBeta needs beta_max > 0")
        elif isinstance(kind, KarrasVE):
            if alpha != 0:
                raise DomainError("KarrasVE requires alpha = 0")
            if not 0 < kind.sigma_min < kind.sigma_max:
                raise DomainError("KarrasVE needs 0 < sigma_min < sigma_max")
            if kind.rho <= 0:
                raise DomainError("KarrasVE needs rho > 0")
        else:
            raise DomainError(f"unknown schedule kind {kind!r}")
        if not kind.horizon > 0:
            raise DomainError("horizon T must be positive")
        self.alpha = alpha
        self.kind = kind

    @classmethod
    def ve_linear(cls, beta_min=0.1, beta_max=20.0, horizon=1.0):
        return cls(0.0, LinearBeta(beta_min, beta_max, horizon))

    @classmethod
    def vp_linear(cls, beta_min=0.1, beta_max=20.0, horizon=1.0, alpha=1.0):
        return cls(alpha, LinearBeta(beta_min, beta_max, horizon))

    @classmethod
    def karras(cls, sigma_min=0.002, sigma_max=80.0, rho=3.0, horizon=1.0):
        return cls(0.0, KarrasVE(sigma_min, sigma_max, rho, horizon))

    @property
    def horizon(self):
        return float(self.kind.horizon)

    @property
    def is_ve(self):
        return self.alpha == 0

    def __repr__(self):
        return f"Schedule(alpha={self.alpha!r}, kind={self.kind!r})"

    def __eq__(self, other):
        return (
            isinstance(other, Schedule)
            and self.alpha == other.alpha
            and self.kind == other.kind
        )

    def __hash__(self):
        return hash((self.alpha, self.kind))

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        T = self.horizon
        if np.any(~np.isfinite(t)) or np.any(t < -_SLACK * T) or np.any(t > T * (1 + _SLACK)):
            raise DomainError(f"time outside [0, {T}]: {t}")
        return np.clip(t, 0.0, T)

    @staticmethod
    def _out(x):
        return float(x) if np.ndim(x) == 0 else x

    def sigma(self, t):
        """Noise level at forward time ``t``.

        For KarrasVE this is the interpolated ``sigma(t)``, so ``sigma(0) =
        sigma_min``; otherwise it is the standard deviation ``sqrt(var(t))``.
        """
        t = self._check_time(t)
        k = self.kind
        if isinstance(k, KarrasVE):
            lo, hi = k.sigma_min ** (1 / k.rho), k.sigma_max ** (1 / k.rho)
            return self._out((lo + (t / k.horizon) * (hi - lo)) ** k.rho)
        return self._out(np.sqrt(self._var(self._integral0(t))))

    def beta_at(self, t):
        """Instantaneous rate ``beta(t)``."""
        t = self._check_time(t)
        k = self.kind
        if isinstance(k, LinearBeta):
            out = k.beta_min + (t / k.horizon) * (k.beta_max - k.beta_min)
        else:
            lo, hi = k.sigma_min ** (1 / k.rho), k.sigma_max ** (1 / k.rho)
            base = lo + (t / k.horizon) * (hi - lo)
            # sigma * sigma' with sigma = base^rho
            out = base**k.rho * k.rho * base ** (k.rho - 1) * (hi - lo) / k.horizon
        return self._out(out)

    def _integral0(self, t):
        k = self.kind
        if isinstance(k, LinearBeta):
            return k.beta_min * t + 0.5 * (k.beta_max - k.beta_min) * t * t / k.horizon
        s = self.sigma(t)
        return 0.5 * (np.square(s) - k.sigma_min**2)

    def beta_integral(self, a, b):
        """Closed-form ``int_a^b beta(u) du`` for ``0 <= a <= b <= T``."""
        a = self._check_time(a)
        b = self._check_time(b)
        if np.any(a > b):
            raise DomainError(f"beta_integral needs a <= b, got a={a}, b={b}")
        k = self.kind
        if isinstance(k, LinearBeta):
            # trapezoid rule is exact for affine beta
            out = 0.5 * (b - a) * (self.beta_at(a) + self.beta_at(b))
        else:
            sa, sb = self.sigma(a), self.sigma(b)
            out = 0.5 * (sb - sa) * (sb + sa)
        return self._out(np.maximum(out, 0.0))

    def _var(self, integral):
        if self.is_ve:
            return 2.0 * integral
        return -np.expm1(-2.0 * self.alpha * integral) / self.alpha

    def forward_moments(self, t):
        """``(m_{0|t}, sigma^2_{0|t})`` of ``X_t`` given ``X_0``."""
        t = self._check_time(t)
        return self.transition(0.0, t)

    def transition(self, a, b):
        """Moments of ``X_b`` given ``X_a`` for forward times ``a <= b``."""
        a = self._check_time(a)
        b = self._check_time(b)
        integral = self.beta_integral(a, b)
        if isinstance(self.kind, KarrasVE):
            sa, sb = self.sigma(a), self.sigma(b)
            var = np.maximum((sb - sa) * (sb + sa), 0.0)
        else:
            var = self._var(integral)
        m = np.exp(-self.alpha * np.asarray(integral))
        if np.ndim(m) == 0:
            return ForwardMoments(float(m), float(var))
        return ForwardMoments(m, var)

    def stationary_var(self):
        """Per-coordinate variance of the reference law ``pi_infty``."""
        if self.is_ve:
            return self.forward_moments(self.horizon).var
        return 1.0 / self.alpha

    def to_dict(self):
        k = self.kind
        if isinstance(k, LinearBeta):
            return {
                "alpha": self.alpha,
                "kind": "linear_beta",
                "beta_min": k.beta_min,
                "beta_max": k.beta_max,
                "horizon": k.horizon,
            }
        return {
            "alpha": self.alpha,
            "kind": "karras_ve",
            "sigma_min": k.sigma_min,
            "sigma_max": k.sigma_max,
            "rho": k.rho,
            "horizon": k.horizon,
        }

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        name = obj.pop("kind", None)
        alpha = float(obj.pop("alpha", 0.0))
        try:
            if name == "linear_beta":
                kind = LinearBeta(**{k: float(v) for k, v in obj.items()})
            elif name == "karras_ve":
                kind = KarrasVE(**{k: float(v) for k, v in obj.items()})
            else:
                raise DomainError(f"unknown schedule kind {name!r}")
        except TypeError as exc:
            raise DomainError(f"bad schedule parameters: {exc}") from None
        return cls(alpha, kind)


@dataclass(frozen=True)
class Grid:
    """Reverse-time grid with exact per-step integrals.

    ``times`` are reverse times and ``deltas[k] = int_{t_k}^{t_{k+1}} beta(T - u) du``.
    A full grid spans ``[0, T]``; :meth:`between` builds sub-grids.
    """

    times: np.ndarray
    deltas: np.ndarray
    horizon: float

    @property
    def n_steps(self):
        return len(self.deltas)

    @property
    def forward_times(self):
        return self.horizon - self.times

    @classmethod
    def from_times(cls, schedule, times):
        times = np.asarray(times, dtype=float)
        T = schedule.horizon
        if times.ndim != 1 or len(times) < 2:
            raise DomainError("a grid needs at least two time points")
        if np.any(np.diff(times) <= 0):
            raise DomainError("grid times must be strictly increasing")
        if times[0] < 0 or times[-1] > T:
            raise DomainError("grid times must lie in [0, T]")
        fwd = T - times
        deltas = np.asarray(schedule.beta_integral(fwd[1:], fwd[:-1]), dtype=float)
        if np.any(deltas <= 0):
            raise DomainError("every grid step must carry positive integrated noise")
        times.setflags(write=False)
        deltas.setflags(write=False)
        return cls(times, deltas, T)

    @classmethod
    def between(cls, schedule, s, t, n_steps):
        """Uniform sub-grid on reverse times ``[s, t]``."""
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if not 0 <= s < t <= schedule.horizon:
            raise DomainError(f"need 0 <= s < t <= T, got s={s}, t={t}")
        return cls.from_times(schedule, np.linspace(s, t, n_steps + 1))

    def index_of_forward_time(self, t_forward):
        """Index ``k`` whose forward time ``T - t_k`` is closest to ``t_forward``."""
        return int(np.argmin(np.abs(self.forward_times - t_forward)))


def make_grid(schedule, n_steps, spacing="uniform-in-t", rho=None):
    """Full reverse-time grid on ``[0, T]`` with ``n_steps`` intervals.

    ``uniform-in-sigma`` places the points so that the noise level
    ``schedule.sigma`` at forward time ``T - t_k`` follows the Karras spacing
    ``(s_hi^(1/rho) + k/N (s_lo^(1/rho) - s_hi^(1/rho)))^rho``.  ``rho``
    defaults to the schedule's own value for KarrasVE and to 7 otherwise.
    """
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise DomainError(f"n_steps must be a positive integer, got {n_steps!r}")
    T = schedule.horizon
    if spacing == "uniform-in-t":
        times = np.linspace(0.0, T, n_steps + 1)
    elif spacing == "uniform-in-sigma":
        if rho is None:
            rho = schedule.kind.rho if isinstance(schedule.kind, KarrasVE) else 7.0
        lo = schedule.sigma(0.0) ** (1 / rho)
        hi = schedule.sigma(T) ** (1 / rho)
        levels = (hi + np.arange(n_steps + 1) / n_steps * (lo - hi)) ** rho
        fwd = np.empty(n_steps + 1)
        fwd[0], fwd[-1] = T, 0.0
        for k in range(1, n_steps):
            fwd[k] = _invert_sigma(schedule, levels[k])
        times = T - fwd
        times[0], times[-1] = 0.0, T
        if np.any(np.diff(times) <= 0):
            raise DomainError(
                f"uniform-in-sigma points collapse in floating point for n_steps={n_steps}, "
                f"rho={rho}; use fewer steps or a smaller rho")
    else:
        raise DomainError(f"unknown spacing {spacing!r}")
    return Grid.from_times(schedule, times)


def _invert_sigma(schedule, level):
    k = schedule.kind
    if isinstance(k, KarrasVE):
        lo, hi = k.sigma_min ** (1 / k.rho), k.sigma_max ** (1 / k.rho)
        return k.horizon * (level ** (1 / k.rho) - lo) / (hi - lo)
    T = schedule.horizon
    return brentq(lambda u: schedule.sigma(u) - level, 0.0, T, xtol=1e-15, rtol=1e-15)
