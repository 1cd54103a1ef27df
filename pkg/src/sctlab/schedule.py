"""Noise schedules, forward marginals and first-order ODE stepping.

Everything here is a pure function of numpy arrays. Time arguments broadcast
against the leading (batch) axis of samples, so a batch of points can carry a
batch of times.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ScheduleError(ValueError):
    """Raised for out-of-range or mis-ordered times."""


VE = "ve"
VP = "vp"


@dataclass(frozen=True)
class NoiseSchedule:
    """x_t = alpha(t) x0 + sigma(t) eps.

    ``ve``: alpha = 1, sigma = t (EDM lineage, default range [0.002, 80]).
    ``vp``: alpha = cos(pi t / 2), sigma = sin(pi t / 2) on a normalized
    t in (0, 1), so x_1 is pure noise.
    """

    kind: str = VE
    t_min: float = 0.002
    t_max: float = 80.0

    def __post_init__(self):
        if self.kind not in (VE, VP):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 <= self.t_min < self.t_max):
            raise ScheduleError(f"need 0 <= t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.kind == VP and self.t_max >= 1.0:
            raise ScheduleError("vp schedule needs t_max < 1 (alpha vanishes at 1)")

    @classmethod
    def ve(cls, t_min=0.002, t_max=80.0) -> "NoiseSchedule":
        return cls(VE, t_min, t_max)

    @classmethod
    def vp(cls, t_min=1e-4, t_max=0.9999) -> "NoiseSchedule":
        return cls(VP, t_min, t_max)

    # accessors
    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == VE:
            return np.ones_like(t)
        return np.cos(0.5 * np.pi * t)

    def sigma(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == VE:
            return t.copy()
        return np.sin(0.5 * np.pi * t)

    def rho(self, t):
        """sigma/alpha = exp(-lambda); the natural integration variable."""
        t = np.asarray(t, dtype=float)
        if self.kind == VE:
            return t.copy()
        return np.tan(0.5 * np.pi * t)

    def t_of_rho(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.kind == VE:
            return rho.copy()
        return np.arctan(rho) * (2.0 / np.pi)

    def lam(self, t):
        """Log-SNR ln(alpha/sigma)."""
        return -np.log(self.rho(t))

    def t_of_lambda(self, lam):
        return self.t_of_rho(np.exp(-np.asarray(lam, dtype=float)))

    def f(self, t):
        """d ln alpha / dt."""
        t = np.asarray(t, dtype=float)
        if self.kind == VE:
            return np.zeros_like(t)
        return -0.5 * np.pi * np.tan(0.5 * np.pi * t)

    def g_squared(self, t):
        """d sigma^2/dt - 2 f sigma^2."""
        t = np.asarray(t, dtype=float)
        if self.kind == VE:
            return 2.0 * t
        # d sin^2/dt = pi sin cos; -2 f sin^2 = pi tan sin^2
        s, c = np.sin(0.5 * np.pi * t), np.cos(0.5 * np.pi * t)
        return np.pi * s * c + np.pi * np.tan(0.5 * np.pi * t) * s * s

    def check_range(self, t, name="t"):
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t < self.t_min) or np.any(t > self.t_max):
            raise ScheduleError(
                f"{name} outside [{self.t_min}, {self.t_max}]: {np.ravel(t)[:4]}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t_min": self.t_min, "t_max": self.t_max}


@dataclass(frozen=True)
class DiffusedPoint:
    x_t: np.ndarray
    t: float
    origin: Optional[tuple] = None


def _bcast(coef, x):
    """Reshape a per-sample coefficient so it broadcasts over trailing dims."""
    coef = np.asarray(coef, dtype=float)
    x = np.asarray(x)
    if coef.ndim == 0 or x.ndim <= coef.ndim:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def forward_marginal(schedule: NoiseSchedule, x0, eps, t) -> DiffusedPoint:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    schedule.check_range(t)
    x_t = _bcast(schedule.alpha(t), x0) * x0 + _bcast(schedule.sigma(t), eps) * eps
    return DiffusedPoint(x_t, t, (x0, eps))


def conditional_epsilon(schedule: NoiseSchedule, x_t, t, x0):
    """(x_t - alpha_t x0) / sigma_t."""
    sigma = schedule.sigma(t)
    if np.any(sigma <= 0):
        raise ScheduleError(f"degenerate time: sigma({t}) = 0")
    x_t = np.asarray(x_t, dtype=float)
    return (x_t - _bcast(schedule.alpha(t), x_t) * np.asarray(x0, dtype=float)) / _bcast(sigma, x_t)


def ddim_step_unchecked(schedule: NoiseSchedule, x_t, t, r, eps_hat):
    x_t = np.asarray(x_t, dtype=float)
    a_t, s_t = _bcast(schedule.alpha(t), x_t), _bcast(schedule.sigma(t), x_t)
    a_r, s_r = _bcast(schedule.alpha(r), x_t), _bcast(schedule.sigma(r), x_t)
    x0_hat = (x_t - s_t * eps_hat) / a_t
    return a_r * x0_hat + s_r * eps_hat


def ddim_step(schedule: NoiseSchedule, x_t, t, r, eps_hat):
    """First-order exponential-integrator step from t down to r, eps held fixed."""
    t_arr, r_arr = np.asarray(t, dtype=float), np.asarray(r, dtype=float)
    if np.any(r_arr >= t_arr):
        raise ScheduleError(f"ddim_step needs r < t, got r={r}, t={t}")
    if np.any(r_arr < min(schedule.t_min, 0.0)) or np.any(t_arr > schedule.t_max):
        raise ScheduleError(f"ddim_step times outside schedule range: t={t}, r={r}")
    return ddim_step_unchecked(schedule, x_t, t, r, np.asarray(eps_hat, dtype=float))


def reward_weight_integral(schedule: NoiseSchedule, t, r):
    """Integral of exp(-lambda) d lambda from lambda_t to lambda_r.

    Closed form exp(-lambda_t) - exp(-lambda_r), i.e. t - r for VE. Positive
    for r < t, which is the sign under which x_r = x_t/alpha_t*alpha_r - alpha_r*reward.
    """
    if np.any(np.asarray(r) > np.asarray(t)):
        raise ScheduleError(f"reward_weight_integral needs r <= t, got r={r}, t={t}")
    return schedule.rho(t) - schedule.rho(r)


def karras_grid(rho_hi: float, rho_lo: float, n: int, power: float = 7.0) -> np.ndarray:
    """n+1 points from rho_hi down to rho_lo, dense near rho_lo."""
    i = np.arange(n + 1) / n
    hi, lo = rho_hi ** (1.0 / power), rho_lo ** (1.0 / power)
    grid = (hi + i * (lo - hi)) ** power
    grid[0], grid[-1] = rho_hi, rho_lo
    return grid
