"""Epsilon targets for consistency training.

one_shot           conditional eps of the generating x0 (plain CT)
variance_reduced   self-normalized posterior average over a reference batch
teacher_oracle     exact marginal eps from the mixture oracle (CD with a perfect teacher)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .oracle import MixtureOracle, as_rng
from .schedule import NoiseSchedule, _bcast, conditional_epsilon

ONE_SHOT = "one_shot"
VARIANCE_REDUCED = "variance_reduced"
TEACHER = "teacher_oracle"
MODES = (ONE_SHOT, VARIANCE_REDUCED, TEACHER)


class TargetError(ValueError):
    pass


@dataclass
class ReferenceBatch:
    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    source: str = "in_batch"

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if len(self.samples) == 0:
            raise TargetError("reference batch is empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.samples),):
                raise TargetError("labels must cover every reference sample")

    def filtered(self, condition):
        if condition is None:
            return self.samples
        if self.labels is None:
            raise TargetError("conditional target requested but references carry no labels")
        sel = self.samples[self.labels == condition]
        if len(sel) == 0:
            raise TargetError(f"no reference samples with label {condition!r}")
        return sel


@dataclass
class TargetEstimate:
    eps_hat: np.ndarray
    weights: np.ndarray
    mode: str
    effective_n: float


def one_shot_target(schedule: NoiseSchedule, x_t, t, x0) -> TargetEstimate:
    eps = conditional_epsilon(schedule, x_t, t, x0)
    return TargetEstimate(eps, np.ones(1), ONE_SHOT, 1.0)


def posterior_weights(schedule: NoiseSchedule, x_t, t, refs, mask=None):
    """Softmax over refs of log N(x_t; alpha_t x0_j, sigma_t^2 I).

    x_t: (n, d), t scalar or (n,), refs: (m, d). ``mask`` (n, m) excludes
    entries. Returns (n, m) weights computed with max-subtraction.
    """
    x_t = np.atleast_2d(x_t)
    n = len(x_t)
    a = np.broadcast_to(schedule.alpha(t), (n,))[:, None]
    s = np.broadcast_to(schedule.sigma(t), (n,))[:, None]
    d2 = (np.sum(x_t ** 2, axis=1)[:, None] - 2 * a * (x_t @ refs.T)
          + a ** 2 * np.sum(refs ** 2, axis=1)[None, :])
    logw = -0.5 * np.maximum(d2, 0.0) / s ** 2
    if mask is not None:
        logw = np.where(mask, logw, -np.inf)
    top = logw.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(top)):
        bad = np.flatnonzero(~np.isfinite(top[:, 0]))
        t_bad = np.broadcast_to(t, (n,))[bad[0]]
        raise TargetError(f"all reference weights underflow at t={t_bad}")
    w = np.exp(logw - top)
    return w / w.sum(axis=1, keepdims=True)


def variance_reduced_target(schedule: NoiseSchedule, x_t, t, refs: ReferenceBatch,
                            condition=None) -> TargetEstimate:
    x_t = np.asarray(x_t, dtype=float)
    pool = refs.filtered(condition)
    w = posterior_weights(schedule, np.atleast_2d(x_t), t, pool)[0]
    x0_bar = w @ pool
    eps = conditional_epsilon(schedule, x_t, t, x0_bar)
    return TargetEstimate(eps, w, VARIANCE_REDUCED, float(1.0 / np.sum(w ** 2)))


def teacher_target(oracle: MixtureOracle, schedule: NoiseSchedule, x_t, t,
                   condition=None) -> TargetEstimate:
    eps = oracle.exact_epsilon(schedule, x_t, t, condition)
    return TargetEstimate(eps, np.ones(1), TEACHER, float("inf"))


def batch_variance_reduced_eps(schedule, x_t, t, x0, refs, own_index=None, ref_size=None,
                               labels=None, ref_labels=None, rng=None):
    """Vectorized variance-reduced eps for a training batch.

    Row i uses its generating x0[i] plus ``ref_size - 1`` other members of
    ``refs`` (all of them when ref_size is None); with class labels the
    candidates are restricted to the same class. ``own_index[i]`` is the
    position of x0[i] inside refs when refs is the batch itself.
    """
    n = len(x_t)
    m = len(refs)
    if ref_size == 1:
        w = np.ones((n, 1))
    else:
        mask = np.ones((n, m), dtype=bool)
        if labels is not None:
            mask &= labels[:, None] == ref_labels[None, :]
        if own_index is not None:
            mask[np.arange(n), own_index] = False
        if ref_size is not None and ref_size - 1 < m:
            # keep a random subset of the other candidates per row
            keys = rng.random((n, m))
            keys = np.where(mask, keys, np.inf)
            kth = np.partition(keys, ref_size - 2, axis=1)[:, ref_size - 2:ref_size - 1]
            mask &= keys <= kth
        a = _bcast(schedule.alpha(t), x_t)
        s = _bcast(schedule.sigma(t), x_t)
        d2 = (np.sum(x_t ** 2, axis=1)[:, None] - 2 * a * (x_t @ refs.T)
              + a ** 2 * np.sum(refs ** 2, axis=1)[None, :])
        logw_other = np.where(mask, -0.5 * np.maximum(d2, 0.0) / s ** 2, -np.inf)
        own_d2 = np.sum((x_t - a * x0) ** 2, axis=1, keepdims=True)
        own_logw = -0.5 * own_d2 / s ** 2
        logw = np.concatenate([own_logw, logw_other], axis=1)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        x0_bar = w[:, :1] * x0 + w[:, 1:] @ refs
        return (x_t - a * x0_bar) / s, w
    return conditional_epsilon(schedule, x_t, t, x0), w


def estimator_report(schedule: NoiseSchedule, oracle: MixtureOracle, modes: Sequence[str],
                     n_values: Sequence[int], t_grid: Sequence[float], trials: int = 10_000,
                     seed=0, chunk: int = 2000):
    """Monte-Carlo MSE of each estimator against the exact eps.

    Rows: dicts with mode, n, t, mse, stderr, plus ``sq_err`` arrays kept for
    paired comparisons (dropped by write_report_csv). Every (mode, n) sees the
    same (x0, eps) draws at a given t.
    """
    if trials < 100:
        raise TargetError("estimator_report needs at least 100 trials")
    rng = as_rng(seed)
    rows = []
    for t in t_grid:
        x0 = oracle.sample_data(trials, seed=rng)
        eps = rng.standard_normal(x0.shape)
        x_t = schedule.alpha(t) * x0 + schedule.sigma(t) * eps
        truth = oracle.exact_epsilon(schedule, x_t, t)
        n_max = max([n for n in n_values] + [1])
        pool = oracle.sample_data(trials * (n_max - 1), seed=rng).reshape(trials, n_max - 1, -1) \
            if n_max > 1 else None
        for mode in modes:
            ns = n_values if mode == VARIANCE_REDUCED else [1]
            for n in ns:
                if mode == ONE_SHOT:
                    est = conditional_epsilon(schedule, x_t, t, x0)
                elif mode == TEACHER:
                    est = truth.copy()
                elif mode == VARIANCE_REDUCED:
                    est = np.empty_like(x_t)
                    for lo in range(0, trials, chunk):
                        hi = min(lo + chunk, trials)
                        refs = np.concatenate([x0[lo:hi, None, :], pool[lo:hi, :n - 1]], axis=1)
                        est[lo:hi] = _vr_rows(schedule, x_t[lo:hi], t, refs)
                else:
                    raise TargetError(f"unknown estimator mode {mode!r}")
                sq = np.sum((est - truth) ** 2, axis=1)
                rows.append({"mode": mode, "n": int(n), "t": float(t), "mse": float(np.mean(sq)),
                             "stderr": float(np.std(sq, ddof=1) / np.sqrt(trials)), "sq_err": sq})
    return rows


def _vr_rows(schedule, x_t, t, refs):
    """x_t: (n, d), refs: (n, m, d) -- each row has its own reference set."""
    a, s = float(schedule.alpha(t)), float(schedule.sigma(t))
    d2 = np.sum((x_t[:, None, :] - a * refs) ** 2, axis=2)
    logw = -0.5 * d2 / s ** 2
    w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    x0_bar = np.einsum("nm,nmd->nd", w, refs)
    return (x_t - a * x0_bar) / s


REPORT_COLUMNS = ("mode", "n", "t", "mse", "stderr")


def write_report_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_COLUMNS)
        for row in rows:
            wr.writerow([row["mode"], row["n"], repr(row["t"]), repr(row["mse"]), repr(row["stderr"])])
