"""Isotropic Gaussian-mixture data with closed-form scores and PF-ODE references."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, karras_grid


class OracleError(ValueError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Component:
    mean: tuple
    std: float
    label: int = 0
    weight: float = 1.0


class MixtureOracle:
    def __init__(self, components: Sequence[Component], normalize: bool = True):
        if not components:
            raise OracleError("mixture needs at least one component")
        self.means = np.array([np.atleast_1d(np.asarray(c.mean, dtype=float)) for c in components])
        self.stds = np.array([float(c.std) for c in components])
        self.labels = np.array([int(c.label) for c in components])
        w = np.array([float(c.weight) for c in components])
        if np.any(w <= 0) or np.any(self.stds < 0):
            raise OracleError("mixture weights must be positive and stdevs nonnegative")
        if normalize:
            w = w / w.sum()
        elif abs(w.sum() - 1.0) > 1e-10:
            raise OracleError(f"mixture weights sum to {w.sum()}, not 1")
        self.weights = w
        self.dim = self.means.shape[1]
        self.components = tuple(components)

    # construction helpers
    @classmethod
    def from_spec(cls, spec: dict) -> "MixtureOracle":
        comps = [Component(tuple(np.atleast_1d(c["mean"]).tolist()), c["std"],
                           c.get("label", 0), c.get("weight", 1.0)) for c in spec["components"]]
        return cls(comps)

    def to_spec(self) -> dict:
        return {"components": [
            {"mean": m.tolist(), "std": float(s), "label": int(l), "weight": float(w)}
            for m, s, l, w in zip(self.means, self.stds, self.labels, self.weights)]}

    @classmethod
    def single_gaussian(cls, dim=1, std=1.0, mean=None):
        mean = np.zeros(dim) if mean is None else mean
        return cls([Component(tuple(np.atleast_1d(mean)), std)])

    @classmethod
    def two_gaussians(cls, separation=1.0, std=0.25):
        return cls([Component((-separation,), std, 0), Component((separation,), std, 1)])

    @classmethod
    def point_masses(cls, points, std=1e-6, labels=None):
        labels = range(len(points)) if labels is None else labels
        return cls([Component(tuple(np.atleast_1d(p)), std, l) for p, l in zip(points, labels)])

    @classmethod
    def ring(cls, n=8, radius=2.0, std=0.1):
        ang = 2 * np.pi * np.arange(n) / n
        return cls([Component((radius * np.cos(a), radius * np.sin(a)), std, k)
                    for k, a in enumerate(ang)])

    @property
    def class_labels(self):
        return sorted(set(self.labels.tolist()))

    def sigma_data(self) -> float:
        """Per-coordinate RMS spread of the mixture."""
        mu = self.weights @ self.means
        second = self.weights @ (np.sum(self.means ** 2, axis=1) / self.dim + self.stds ** 2)
        return float(np.sqrt(second - np.sum(mu ** 2) / self.dim))

    def _mask(self, label):
        if label is None:
            return np.ones(len(self.weights), dtype=bool)
        mask = self.labels == label
        if not mask.any():
            raise OracleError(f"unknown class label {label!r}")
        return mask

    def sample_data(self, n: int, class_filter: Optional[int] = None, seed=None, return_labels=False):
        if n < 1:
            raise OracleError("n must be >= 1")
        rng = as_rng(seed)
        mask = self._mask(class_filter)
        idx_pool = np.flatnonzero(mask)
        p = self.weights[mask] / self.weights[mask].sum()
        comp = idx_pool[rng.choice(len(idx_pool), size=n, p=p)]
        x = self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.dim))
        if return_labels:
            return x, self.labels[comp]
        return x

    # scores
    def _log_resp(self, x, t, schedule, mask):
        """Log posterior component responsibilities and per-component variances at x_t."""
        x = np.atleast_2d(x)
        a = np.broadcast_to(schedule.alpha(t), x.shape[:1])[:, None]
        s = np.broadcast_to(schedule.sigma(t), x.shape[:1])[:, None]
        means, stds, w = self.means[mask], self.stds[mask], self.weights[mask]
        var = a ** 2 * stds[None, :] ** 2 + s ** 2                    # (n, K)
        diff = x[:, None, :] - a[:, :, None] * means[None, :, :]      # (n, K, d)
        logp = (np.log(w)[None, :] - 0.5 * self.dim * np.log(2 * np.pi * var)
                - 0.5 * np.sum(diff ** 2, axis=2) / var)
        logp -= logp.max(axis=1, keepdims=True)
        return logp - logsumexp(logp, axis=1, keepdims=True), var, diff, s

    def exact_epsilon(self, schedule: NoiseSchedule, x_t, t, class_filter=None):
        """-sigma_t * grad log p_t(x_t), as the posterior mean of conditional eps."""
        if np.any(schedule.sigma(t) <= 0):
            raise OracleError(f"degenerate time t={t}: sigma is zero")
        x_t = np.asarray(x_t, dtype=float)
        squeeze = x_t.ndim == 1
        logr, var, diff, s = self._log_resp(x_t, t, schedule, self._mask(class_filter))
        eps = s * np.einsum("nk,nkd->nd", np.exp(logr) / var, diff)
        return eps[0] if squeeze else eps

    def log_density(self, schedule, x_t, t):
        x = np.atleast_2d(np.asarray(x_t, dtype=float))
        a = np.broadcast_to(schedule.alpha(t), x.shape[:1])[:, None]
        s = np.broadcast_to(schedule.sigma(t), x.shape[:1])[:, None]
        var = a ** 2 * self.stds[None, :] ** 2 + s ** 2
        diff = x[:, None, :] - a[:, :, None] * self.means[None, :, :]
        logp = (np.log(self.weights)[None, :] - 0.5 * self.dim * np.log(2 * np.pi * var)
                - 0.5 * np.sum(diff ** 2, axis=2) / var)
        return logsumexp(logp, axis=1)

    def sample_posterior(self, schedule, x_t, t, n, seed=None):
        """Draw x0 ~ p(x0 | x_t) for a single point x_t."""
        rng = as_rng(seed)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        logr, var, _, _ = self._log_resp(x_t, t, schedule, self._mask(None))
        a = float(schedule.alpha(t))
        comp = rng.choice(len(self.weights), size=n, p=np.exp(logr[0]) / np.exp(logr[0]).sum())
        gain = a * self.stds[comp] ** 2 / var[0, comp]
        mean = self.means[comp] + gain[:, None] * (x_t[0] - a * self.means[comp])
        post_std = np.sqrt(self.stds[comp] ** 2 * (1 - a * gain))
        return mean + post_std[:, None] * rng.standard_normal((n, self.dim))

    # PF-ODE reference
    def solve_reference(self, schedule: NoiseSchedule, x_T, times, substeps: int = 1024,
                        class_filter=None) -> "ReferenceTrajectory":
        """Integrate the PF-ODE through ``times`` with the exact score.

        Works in y = x/alpha against rho = sigma/alpha, where the ODE reads
        dy/drho = eps(x, t). Each interval gets a Karras-spaced sub-grid and a
        trapezoidal (Heun) update; the reward is the matching trapezoid sum,
        so y_r = y_t - reward holds to round-off on every interval.
        """
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) < 1:
            raise OracleError("times must be a 1-D grid")
        if np.any(np.diff(times) > 0):
            raise OracleError(f"times must be descending, got {times}")
        if times[0] > schedule.t_max or times[-1] < 0:
            raise OracleError("times outside schedule range")
        x = np.array(x_T, dtype=float, copy=True)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        states = [x.copy()]
        rewards = []
        for t_hi, t_lo in zip(times[:-1], times[1:]):
            reward = np.zeros_like(x)
            if t_hi > t_lo:
                x, reward = self._heun_interval(schedule, x, t_hi, t_lo, substeps, class_filter)
            states.append(x.copy())
            rewards.append(reward)
        states = np.array(states)
        rewards = np.array(rewards) if rewards else np.zeros((0,) + x.shape)
        if squeeze:
            states, rewards = states[:, 0], rewards[:, 0]
        return ReferenceTrajectory(times, states, rewards)

    def _heun_interval(self, schedule, x, t_hi, t_lo, n, class_filter):
        rhos = karras_grid(float(schedule.rho(t_hi)), float(schedule.rho(t_lo)), n)
        ts = schedule.t_of_rho(rhos)
        ts[0], ts[-1] = t_hi, t_lo
        y = x / schedule.alpha(t_hi)
        reward = np.zeros_like(x)
        eps_c = self.exact_epsilon(schedule, x, ts[0], class_filter)
        for i in range(n):
            h = rhos[i] - rhos[i + 1]
            y_pred = y - h * eps_c
            if schedule.sigma(ts[i + 1]) > 0:
                eps_n = self.exact_epsilon(schedule, schedule.alpha(ts[i + 1]) * y_pred, ts[i + 1],
                                           class_filter)
                step = 0.5 * (eps_c + eps_n)
            else:
                eps_n = None
                step = eps_c
            y = y - h * step
            reward += h * step
            if eps_n is not None and i + 1 < n:
                eps_c = self.exact_epsilon(schedule, schedule.alpha(ts[i + 1]) * y, ts[i + 1],
                                           class_filter)
        return schedule.alpha(t_lo) * y, reward

    def solution_point(self, schedule, x_t, t, substeps=1024, class_filter=None):
        """y = x/alpha at t_min on the PF-ODE trajectory through (x_t, t)."""
        x_t = np.asarray(x_t, dtype=float)
        if t <= schedule.t_min:
            return x_t / schedule.alpha(schedule.t_min)
        traj = self.solve_reference(schedule, x_t, [t, schedule.t_min], substeps, class_filter)
        return traj.states[-1] / schedule.alpha(schedule.t_min)

    def exact_value(self, schedule, x_t, t, substeps=1024, class_filter=None):
        """h_true(x_t, t) = x_t/alpha_t - x0 solution."""
        schedule.check_range(t)
        x_t = np.asarray(x_t, dtype=float)
        return x_t / schedule.alpha(t) - self.solution_point(schedule, x_t, t, substeps, class_filter)


@dataclass
class ReferenceTrajectory:
    times: np.ndarray
    states: np.ndarray
    accumulated_reward: np.ndarray

    def interval_reward(self, i: int, j: int):
        """Total reward from times[i] down to times[j]."""
        return self.accumulated_reward[i:j].sum(axis=0)


class OracleDenoiser:
    """Perfect x0 predictor: maps (x, t) to the exact PF-ODE solution point.

    Stands in for a trained consistency net wherever the net is only read
    through ``predict_x0``.
    """

    def __init__(self, oracle: MixtureOracle, schedule: NoiseSchedule, substeps: int = 256):
        self.oracle, self.schedule, self.substeps = oracle, schedule, substeps
        self.dim = oracle.dim

    def predict_x0(self, x, t, label=None):
        x = np.asarray(x, dtype=float)
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            return self.oracle.solution_point(self.schedule, x, float(t_arr), self.substeps, label)
        out = np.empty_like(x)
        for tv in np.unique(t_arr):
            sel = t_arr == tv
            out[sel] = self.oracle.solution_point(self.schedule, x[sel], float(tv), self.substeps, label)
        return out
