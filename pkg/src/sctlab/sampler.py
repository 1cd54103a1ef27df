"""One-step, multistep, phased and guided sampling.

Every sampler reads its model only through ``predict_x0(x, t, label)``, so a
ConsistencyNet, a GuidedDenoiser or an OracleDenoiser can be passed in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .oracle import as_rng
from .schedule import NoiseSchedule, _bcast

ONE_STEP = "one_step"
STOCHASTIC = "stochastic_multistep"
PHASED = "phased_deterministic"


class SamplerError(ValueError):
    pass


@dataclass
class SamplePlan:
    mode: str = ONE_STEP
    times: Sequence[float] = ()
    edges: Optional[Sequence[float]] = None
    eta: float = 1.0
    omega: Optional[float] = None

    def __post_init__(self):
        if self.mode not in (ONE_STEP, STOCHASTIC, PHASED):
            raise SamplerError(f"unknown sampling mode {self.mode!r}")
        if not 0.0 < self.eta <= 1.0:
            raise SamplerError(f"eta must lie in (0, 1], got {self.eta}")
        if self.edges is not None:
            validate_edges(self.edges)


def validate_edges(edges, schedule: Optional[NoiseSchedule] = None):
    e = np.asarray(edges, dtype=float)
    if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) >= 0):
        raise SamplerError(f"edges must be strictly descending with at least two entries: {edges}")
    if e[-1] < 0:
        raise SamplerError("last edge must be >= 0")
    if schedule is not None:
        if not np.isclose(e[0], schedule.t_max, rtol=1e-12, atol=0):
            raise SamplerError(f"first edge {e[0]} must equal t_max={schedule.t_max}")
        if e[-1] > schedule.t_min:
            raise SamplerError(f"last edge {e[-1]} must not exceed t_min={schedule.t_min}")
    return e


def make_edges(schedule: NoiseSchedule, n_edges: int, spacing: str = "uniform_t") -> np.ndarray:
    """n_edges points from t_max down to t_min."""
    if n_edges < 2:
        raise SamplerError("need at least two edges")
    if spacing == "uniform_t":
        e = np.linspace(schedule.t_max, schedule.t_min, n_edges)
    elif spacing == "uniform_lambda":
        lam = np.linspace(schedule.lam(schedule.t_max), schedule.lam(schedule.t_min), n_edges)
        e = schedule.t_of_lambda(lam)
    else:
        raise SamplerError(f"unknown edge spacing {spacing!r}")
    e[0], e[-1] = schedule.t_max, schedule.t_min
    return e


def edge_visits(edges, eta: float) -> np.ndarray:
    """s_1 -> eta s_2 -> ... -> eta s_{n-1} -> s_n; the end points are never scaled."""
    e = np.array(edges, dtype=float)
    if not 0.0 < eta <= 1.0:
        raise SamplerError(f"eta must lie in (0, 1], got {eta}")
    if eta != 1.0:
        e[1:-1] = eta * e[1:-1]
    return e


class GuidedDenoiser:
    """x0 prediction guided by a weaker copy of the model.

    D = omega * D_theta - (omega - 1) * D_star; omega = 1 is unguided and
    omega = 0 returns the weak model.
    """

    def __init__(self, net, net_star, omega: float):
        if omega < 0:
            raise SamplerError("guidance strength must be >= 0")
        same = getattr(net, "same_arch", None)
        if same is not None and not same(net_star):
            raise SamplerError("guided nets must share an architecture")
        self.net, self.net_star, self.omega = net, net_star, float(omega)
        self.dim = net.dim

    def predict_x0(self, x, t, label=None):
        d = self.net.predict_x0(x, t, label)
        d_star = self.net_star.predict_x0(x, t, label)
        return self.omega * d - (self.omega - 1.0) * d_star


def guided_predict(net, net_star, schedule, x, t, label, omega):
    return GuidedDenoiser(net, net_star, omega).predict_x0(x, t, label)


def prior_sample(schedule: NoiseSchedule, n: int, dim: int, seed) -> np.ndarray:
    rng = as_rng(seed)
    return float(schedule.sigma(schedule.t_max)) * rng.standard_normal((n, dim))


def one_step(net, schedule: NoiseSchedule, x_T, label=None):
    return net.predict_x0(x_T, schedule.t_max, label)


def stochastic_multistep(net, schedule: NoiseSchedule, x_T, times, label=None, seed=0):
    """Predict x0, re-noise to the next time, predict again."""
    rng = as_rng(seed)
    times = list(times)
    if any(t >= schedule.t_max for t in times) or any(b >= a for a, b in zip(times, times[1:])):
        raise SamplerError("multistep times must descend below t_max")
    x0 = net.predict_x0(x_T, schedule.t_max, label)
    for t in times:
        noise = rng.standard_normal(np.shape(x0))
        x = schedule.alpha(t) * x0 + schedule.sigma(t) * noise
        x0 = net.predict_x0(x, t, label)
    return x0


def phased_step_from_x0(schedule: NoiseSchedule, x0_hat, x_t, t, s):
    """Move from (x_t, t) to time s along the line through the x0 prediction.

    x_s = alpha_s x0 + sigma_s (x_t - alpha_t x0)/sigma_t, which for VE is
    x0 + (s/t)(x_t - x0).
    """
    if schedule.kind == "ve":
        if np.ndim(t) == 0 and np.ndim(s) == 0:
            if s == 0:
                return np.array(x0_hat, dtype=float, copy=True)
            if s == t:
                return np.array(x_t, dtype=float, copy=True)
        ratio = _bcast(np.asarray(s, dtype=float) / np.asarray(t, dtype=float), x_t)
        return x0_hat + ratio * (x_t - x0_hat)
    a_t, s_t = _bcast(schedule.alpha(t), x_t), _bcast(schedule.sigma(t), x_t)
    a_s, s_s = _bcast(schedule.alpha(s), x_t), _bcast(schedule.sigma(s), x_t)
    return a_s * x0_hat + s_s * (x_t - a_t * x0_hat) / s_t


def phased_step(net, schedule: NoiseSchedule, x_t, t, s, label=None):
    if not 0 <= s <= t:
        raise SamplerError(f"phased_step needs 0 <= s <= t, got s={s}, t={t}")
    if s == t:
        return np.array(x_t, dtype=float, copy=True)
    return phased_step_from_x0(schedule, net.predict_x0(x_t, t, label), x_t, t, s)


def phased_sample(net, schedule: NoiseSchedule, x_T, edges, eta: float = 1.0, label=None,
                  return_path=False):
    validate_edges(edges)
    visits = edge_visits(edges, eta)
    x = np.array(x_T, dtype=float, copy=True)
    path = [x]
    for t, s in zip(visits[:-1], visits[1:]):
        x = phased_step(net, schedule, x, t, s, label)
        path.append(x)
    if return_path:
        return x, visits, path
    return x


def draw(net, schedule: NoiseSchedule, plan: SamplePlan, n: int, seed, label=None, net_star=None):
    """Sample n points under ``plan``; guidance applies when plan.omega is set."""
    rng = as_rng(seed)
    model = net
    if plan.omega is not None:
        if net_star is None:
            raise SamplerError("guidance requested without a weak model")
        model = GuidedDenoiser(net, net_star, plan.omega)
    x_T = prior_sample(schedule, n, net.dim, rng)
    if plan.mode == ONE_STEP:
        return one_step(model, schedule, x_T, label)
    if plan.mode == STOCHASTIC:
        return stochastic_multistep(model, schedule, x_T, plan.times, label, rng)
    if plan.edges is None:
        raise SamplerError("phased sampling needs edges")
    return phased_sample(model, schedule, x_T, plan.edges, plan.eta, label)
