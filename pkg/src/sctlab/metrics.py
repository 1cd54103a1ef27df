"""Sliced Wasserstein / MMD distances and the sweep tables built on them."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .oracle import as_rng


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    metric: str
    value: float
    n_a: int
    n_b: int
    setting: float
    seed: object
    stderr: Optional[float] = None


def _pair(a, b, rng):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise MetricError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _equalize(a, b, rng):
    if len(a) > len(b):
        a = a[np.sort(rng.choice(len(a), len(b), replace=False))]
    elif len(b) > len(a):
        b = b[np.sort(rng.choice(len(b), len(a), replace=False))]
    return a, b


def sliced_wasserstein(a, b, projections: int = 128, seed=0) -> float:
    """Mean over random unit directions of the 1-D W2 distance."""
    if projections < 1:
        raise MetricError("need at least one projection")
    rng = as_rng(seed)
    a, b = _pair(a, b, rng)
    dirs = rng.standard_normal((a.shape[1], projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    a, b = _equalize(a, b, rng)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def sliced_wasserstein_report(a, b, projections=128, seed=0) -> MetricReport:
    return MetricReport("sliced_wasserstein", sliced_wasserstein(a, b, projections, seed),
                        len(a), len(b), projections, seed)


def median_bandwidth(a, b) -> float:
    z = np.concatenate([a, b])
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
    iu = np.triu_indices(len(z), 1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def mmd_rbf(a, b, bandwidth: Optional[float] = None, seed=0) -> MetricReport:
    """Unbiased squared MMD with k(x, y) = exp(-|x - y|^2 / (2 h^2)).

    Sets are equalized first; the standard error comes from the variance of
    the per-row U-statistic kernel means.
    """
    rng = as_rng(seed)
    a, b = _pair(a, b, rng)
    a, b = _equalize(a, b, rng)
    m = len(a)
    if m < 2:
        raise MetricError("mmd needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)

    def k(u, v):
        d2 = np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=2)
        if np.isinf(h):
            return np.ones_like(d2)
        return np.exp(-d2 / (2 * h * h))

    kxx, kyy, kxy = k(a, a), k(b, b), k(a, b)
    hmat = kxx + kyy - kxy - kxy.T
    np.fill_diagonal(hmat, 0.0)
    value = hmat.sum() / (m * (m - 1))
    row = hmat.sum(axis=1) / (m - 1)
    stderr = 2.0 * np.std(row, ddof=1) / np.sqrt(m) if m > 2 else float("nan")
    return MetricReport("mmd_rbf", float(value), m, m, h, seed, float(stderr))


# tables

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_plot_data(path, triplets: Iterable[tuple]):
    """(x, y, series) rows for any plotting tool."""
    write_csv(path, ("x", "y", "series"), triplets)


def eta_sweep(net, schedule, oracle, edges, etas=(0.7, 0.8, 0.9, 1.0), n_samples=10_000,
              seed=0, projections=128, label=None):
    """One row (eta, sw) per edge-scaling factor, same noise for every eta."""
    from .sampler import phased_sample, prior_sample

    rng = as_rng(seed)
    x_T = prior_sample(schedule, n_samples, net.dim, rng)
    data = oracle.sample_data(n_samples, class_filter=label, seed=rng)
    proj_seed = int(rng.integers(2 ** 31))
    rows = []
    for eta in etas:
        x = phased_sample(net, schedule, x_T, edges, eta, label)
        rows.append((float(eta), sliced_wasserstein(x, data, projections, proj_seed)))
    return rows


def cfg_sweep(net, net_star, schedule, oracle, omegas=(0.0, 1.0, 1.2, 1.5, 2.0), n_samples=10_000,
              seed=0, projections=128, two_step_time=None, label=None):
    """Rows (omega, sw_1step, sw_2step) plus an 'unguided' row with omega=nan first."""
    from .sampler import GuidedDenoiser, one_step, prior_sample, stochastic_multistep

    rng = as_rng(seed)
    x_T = prior_sample(schedule, n_samples, net.dim, rng)
    data = oracle.sample_data(n_samples, class_filter=label, seed=rng)
    noise_seed = int(rng.integers(2 ** 31))
    proj_seed = int(rng.integers(2 ** 31))
    times = [two_step_time] if two_step_time is not None else []

    def score(model):
        x1 = one_step(model, schedule, x_T, label)
        x2 = stochastic_multistep(model, schedule, x_T, times, label, noise_seed)
        return (sliced_wasserstein(x1, data, projections, proj_seed),
                sliced_wasserstein(x2, data, projections, proj_seed))

    rows = [(float("nan"),) + score(net)]
    for om in omegas:
        rows.append((float(om),) + score(GuidedDenoiser(net, net_star, om)))
    return rows


def schedule_dump(plan, schedule, t_values, iters):
    """Rows (t, iter, r) of the r-mapping over a grid."""
    from .trainer import r_of

    return [(float(t), int(it), float(r_of(plan, schedule, t, it)))
            for it in iters for t in t_values]
