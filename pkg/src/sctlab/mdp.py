"""The PF-ODE as a deterministic MDP, and consistency training read as TD learning.

State (t, x); action = one solver step to the next time; reward = the
exp(-lambda)-weighted eps integral over the step; value = h(x, t), the
remaining integral down to t_min. Rewards stay vector-valued.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .oracle import MixtureOracle, as_rng
from .schedule import NoiseSchedule, ScheduleError, ddim_step, reward_weight_integral


@dataclass(frozen=True)
class MdpState:
    t: float
    x: np.ndarray


@dataclass(frozen=True)
class MdpTransition:
    state: MdpState
    next_x: np.ndarray
    next_t: float
    reward_estimate: np.ndarray
    reward_mode: str


EpsSource = Callable[[np.ndarray, float], object]


def _eps_of(source, x, t):
    est = source(x, t)
    return (getattr(est, "eps_hat", est), getattr(est, "mode", "custom"))


def oracle_eps_source(oracle: MixtureOracle, schedule: NoiseSchedule, condition=None):
    from .targets import teacher_target

    return lambda x, t: teacher_target(oracle, schedule, x, t, condition)


def step(schedule: NoiseSchedule, state: MdpState, next_t: float, eps_source) -> MdpTransition:
    if next_t > state.t:
        raise ScheduleError(f"next_t={next_t} must not exceed state.t={state.t}")
    if next_t == state.t:
        x = np.array(state.x, dtype=float)
        return MdpTransition(state, x, next_t, np.zeros_like(x), "none")
    eps, mode = _eps_of(eps_source, state.x, state.t)
    next_x = ddim_step(schedule, state.x, state.t, next_t, eps)
    reward = eps * reward_weight_integral(schedule, state.t, next_t)
    return MdpTransition(state, next_x, float(next_t), reward, mode)


def n_step_rollout(schedule: NoiseSchedule, state: MdpState, times: Sequence[float],
                   eps_source) -> List[MdpTransition]:
    times = list(times)
    if any(b > a for a, b in zip([state.t] + times[:-1], times)):
        raise ScheduleError("rollout times must descend from the state time")
    out = []
    for nt in times:
        tr = step(schedule, state, nt, eps_source)
        out.append(tr)
        state = MdpState(nt, tr.next_x)
    return out


def total_reward(transitions: Sequence[MdpTransition]):
    return sum(tr.reward_estimate for tr in transitions)


def value_of(model, schedule: NoiseSchedule, state: MdpState, label=None):
    """h(x, t) = x/alpha_t - x0_hat(x, t)."""
    x = np.asarray(state.x, dtype=float)
    return x / schedule.alpha(state.t) - model.predict_x0(x, state.t, label)


def bellman_residual(model, schedule: NoiseSchedule, oracle: MixtureOracle, t: float, r: float,
                     n_points: int = 64, seed=0, substeps: int = 1024) -> float:
    """Mean || h(x_t, t) - R(t->r) - h(x_r, r) || over oracle trajectories.

    x_t comes from the forward marginal of oracle data; R and x_r from the
    exact reference solve.
    """
    if not r < t:
        raise ScheduleError(f"bellman_residual needs r < t, got r={r}, t={t}")
    rng = as_rng(seed)
    x0 = oracle.sample_data(n_points, seed=rng)
    x_t = schedule.alpha(t) * x0 + schedule.sigma(t) * rng.standard_normal(x0.shape)
    traj = oracle.solve_reference(schedule, x_t, [t, r], substeps)
    x_r = traj.states[-1]
    h_t = x_t / schedule.alpha(t) - model.predict_x0(x_t, t)
    h_r = x_r / schedule.alpha(r) - model.predict_x0(x_r, r)
    res = h_t - traj.accumulated_reward[0] - h_r
    return float(np.mean(np.linalg.norm(res, axis=1)))
