"""Consistency training loop: CT, SCT (variance-reduced), CD with an exact teacher.

Supports the progressive r-mapping, its phased variant with edges, a fixed
partition r = t(1 - 1/k), 1/(t - r + delta) weighting and a pseudo-Huber
distance.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .net import ConsistencyNet, EmaShadow, ema_update
from .oracle import MixtureOracle, as_rng
from .schedule import NoiseSchedule, _bcast, ddim_step_unchecked
from .targets import MODES, ONE_SHOT, VARIANCE_REDUCED, batch_variance_reduced_eps


class TrainingError(RuntimeError):
    """Numerical abort (non-finite loss or gradient)."""


STOP_GRAD = "stop_grad"
EMA = "ema"


@dataclass
class TrainPlan:
    p_mean: float = -1.1
    p_std: float = 2.0
    q: float = 1.25
    d: int = 200
    n_fn: str = "constant"
    delta: float = 1e-4
    edges: Optional[Sequence[float]] = None
    fixed_partition: Optional[int] = None
    target_mode: str = VARIANCE_REDUCED
    theta_minus_mode: str = STOP_GRAD
    ref_size: Optional[int] = None        # None: every batch member is a reference
    ref_source: str = "in_batch"          # or "pool"
    pool_size: int = 4096
    xr_mode: str = "target_eps"           # or "shared_noise"
    conditional: bool = False
    loss: str = "pseudo_huber"
    huber_c: Optional[float] = None       # None: 0.03 * sqrt(dim)
    lr: float = 1e-3
    warmup: int = 100
    betas: tuple = (0.9, 0.999)
    ema_decays: tuple = (0.999,)
    eval_weights: str = "ema"             # or "raw"

    def __post_init__(self):
        if self.target_mode not in MODES:
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if self.theta_minus_mode not in (STOP_GRAD, EMA):
            raise ValueError(f"unknown theta_minus mode {self.theta_minus_mode!r}")
        if self.q <= 1 or self.d < 1 or self.delta <= 0:
            raise ValueError("need q > 1, d >= 1, delta > 0")
        if self.n_fn not in ("constant", "sigmoid"):
            raise ValueError(f"unknown n_fn {self.n_fn!r}")
        if self.fixed_partition is not None and self.fixed_partition < 1:
            raise ValueError("fixed_partition must be >= 1")
        if self.ref_size is not None and self.ref_size < 1:
            raise ValueError("ref_size must be >= 1")
        if self.theta_minus_mode == EMA and not self.ema_decays:
            raise ValueError("EMA target needs at least one EMA decay")


def n_of_t(plan: TrainPlan, t):
    t = np.asarray(t, dtype=float)
    if plan.n_fn == "constant":
        return np.ones_like(t)
    return (1.0 + 8.0 / (1.0 + np.exp(t))) / 5.0


def phase_floor(plan: TrainPlan, schedule: NoiseSchedule, t):
    """Greatest edge strictly below t (phased) or t_min."""
    t = np.asarray(t, dtype=float)
    if plan.edges is None:
        return np.full_like(t, schedule.t_min)
    e = np.sort(np.asarray(plan.edges, dtype=float))
    idx = np.searchsorted(e, t, side="left") - 1
    return np.where(idx >= 0, e[np.clip(idx, 0, None)], t)


def r_of(plan: TrainPlan, schedule: NoiseSchedule, t, iteration: int):
    t = np.asarray(t, dtype=float)
    floor = phase_floor(plan, schedule, t)
    if plan.fixed_partition is not None:
        r = np.maximum(t * (1.0 - 1.0 / plan.fixed_partition), floor)
    else:
        k = iteration // plan.d
        frac = np.maximum(0.0, 1.0 - n_of_t(plan, t) * math.exp(-k * math.log(plan.q)))
        if plan.edges is None:
            r = np.maximum(frac * t, floor)
        else:
            r = frac * (t - floor) + floor
    # keep r strictly below t once q^-k rounds away (t at its floor stays put)
    below = np.nextafter(t, -np.inf)
    return np.where(t > floor, np.minimum(r, below), t)


def fixed_partition_r(t, k: int, floor: float = 0.0):
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(t * (1.0 - 1.0 / k), floor)


def sample_t(plan: TrainPlan, schedule: NoiseSchedule, rng, size=None):
    z = rng.standard_normal(size)
    return np.clip(np.exp(plan.p_mean + plan.p_std * z), schedule.t_min, schedule.t_max)


def loss_weight(plan: TrainPlan, t, r):
    return 1.0 / (np.asarray(t) - np.asarray(r) + plan.delta)


def _edge_coeffs(schedule, t, s):
    """x_s = a * D + b * x_t for the move along the x0 prediction."""
    if schedule.kind == "ve":
        b = s / t
        return 1.0 - b, b
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    a_s, s_s = schedule.alpha(s), schedule.sigma(s)
    return a_s - s_s * a_t / s_t, s_s / s_t


@dataclass
class TrainStepReport:
    iter: int
    t: float
    r: float
    loss: float
    weight: float
    grad_norm: float
    mode: str


@dataclass
class StepContext:
    """Everything besides the student parameters that defines a loss evaluation."""
    x0: np.ndarray
    labels: Optional[np.ndarray]
    t: np.ndarray
    r: np.ndarray
    x_t: np.ndarray
    x_r: np.ndarray
    correction: Optional[np.ndarray]
    weight: np.ndarray


def build_step(net: ConsistencyNet, schedule, plan: TrainPlan, x0, labels, rng, iteration,
               oracle: Optional[MixtureOracle] = None, pool=None, pool_labels=None) -> StepContext:
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    if n == 0:
        raise TrainingError("empty batch")
    cond = labels if plan.conditional else None
    t = sample_t(plan, schedule, rng, n)
    eps = rng.standard_normal(x0.shape)
    a_t, s_t = _bcast(schedule.alpha(t), x0), _bcast(schedule.sigma(t), x0)
    x_t = a_t * x0 + s_t * eps
    r = r_of(plan, schedule, t, iteration)

    if plan.target_mode == ONE_SHOT:
        eps_hat = (x_t - a_t * x0) / s_t
    elif plan.target_mode == VARIANCE_REDUCED:
        if plan.ref_source == "pool" and pool is not None:
            refs, ref_labels, own = pool, pool_labels, None
        else:
            refs, ref_labels, own = x0, labels, np.arange(n)
        eps_hat, _ = batch_variance_reduced_eps(
            schedule, x_t, t, x0, refs, own_index=own, ref_size=plan.ref_size,
            labels=cond, ref_labels=ref_labels if cond is not None else None, rng=rng)
    else:
        if oracle is None:
            raise TrainingError("teacher_oracle mode needs an oracle")
        if cond is None:
            eps_hat = oracle.exact_epsilon(schedule, x_t, t)
        else:
            eps_hat = np.empty_like(x_t)
            for c in np.unique(cond):
                sel = cond == c
                eps_hat[sel] = oracle.exact_epsilon(schedule, x_t[sel], t[sel], int(c))

    live = r < t
    x_r = np.where(live[:, None], ddim_step_unchecked(schedule, x_t, t, r, eps_hat), x_t)
    correction = None
    if plan.xr_mode == "shared_noise":
        shared = _bcast(schedule.alpha(r), x0) * x0 + _bcast(schedule.sigma(r), x0) * eps
        shared = np.where(live[:, None], shared, x_t)
        # reward-corrected target: D(x_r') + (x_r - x_r')/alpha_r keeps the Bellman form
        correction = (x_r - shared) / _bcast(schedule.alpha(r), x0)
        x_r = shared
    return StepContext(x0, labels, t, r, x_t, x_r, correction, loss_weight(plan, t, r))


def target_output(net: ConsistencyNet, schedule, plan: TrainPlan, ctx: StepContext, target_params):
    lab = ctx.labels if net.n_classes else None
    tgt = net.predict_x0(ctx.x_r, ctx.r, lab, params=target_params)
    if ctx.correction is not None:
        tgt = tgt + ctx.correction
    if plan.edges is not None:
        s = phase_floor(plan, schedule, ctx.t)
        a, b = _edge_coeffs(schedule, ctx.r, s)
        tgt = np.where((ctx.r == s)[:, None], ctx.x_r, a[:, None] * tgt + b[:, None] * ctx.x_r)
    return tgt


def loss_from_context(net: ConsistencyNet, schedule, plan: TrainPlan, ctx: StepContext,
                      params, target, want_grad=True):
    lab = ctx.labels if net.n_classes else None
    out, cache = net.forward_with_cache(ctx.x_t, ctx.t, lab, params)
    if plan.edges is not None:
        s = phase_floor(plan, schedule, ctx.t)
        a_coef, b_coef = _edge_coeffs(schedule, ctx.t, s)
        student = a_coef[:, None] * out + b_coef[:, None] * ctx.x_t
    else:
        a_coef = None
        student = out
    diff = student - target
    n, dim = diff.shape
    sq = np.sum(diff ** 2, axis=1)
    if plan.loss == "pseudo_huber":
        c = plan.huber_c if plan.huber_c is not None else 0.03 * math.sqrt(dim)
        root = np.sqrt(sq + c * c)
        dist = root - c
        dd = diff / root[:, None]
    else:
        dist = sq
        dd = 2.0 * diff
    live = ctx.r < ctx.t
    w = np.where(live, ctx.weight, 0.0)
    loss = float(np.mean(w * dist))
    if not want_grad:
        return loss, None
    up = (w / n)[:, None] * dd
    if a_coef is not None:
        up = up * a_coef[:, None]
    return loss, net.backprop_cached(cache, up, params)


def loss_and_grad(net: ConsistencyNet, target_params, schedule: NoiseSchedule, plan: TrainPlan,
                  x0, labels=None, seed=0, iteration: int = 0, oracle=None, pool=None,
                  pool_labels=None):
    rng = as_rng(seed)
    ctx = build_step(net, schedule, plan, x0, labels, rng, iteration, oracle, pool, pool_labels)
    target = target_output(net, schedule, plan, ctx, target_params)
    loss, grad = loss_from_context(net, schedule, plan, ctx, net.params, target)
    gnorm = float(np.linalg.norm(grad))
    report = TrainStepReport(iteration, float(np.mean(ctx.t)), float(np.mean(ctx.r)), loss,
                             float(np.max(ctx.weight)), gnorm, plan.target_mode)
    if not (math.isfinite(loss) and math.isfinite(gnorm)):
        bad = np.flatnonzero(~np.isfinite(ctx.weight) | ~np.isfinite(ctx.x_r).all(axis=1))
        i = int(bad[0]) if len(bad) else 0
        raise TrainingError(f"trainer.loss_and_grad: non-finite loss/gradient at "
                            f"t={ctx.t[i]!r}, r={ctx.r[i]!r} (iter {iteration})")
    return loss, grad, report


class Adam:
    def __init__(self, n, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, warmup=0):
        self.lr, self.b1, self.b2, self.eps, self.warmup = lr, betas[0], betas[1], eps, warmup
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.k)
        v_hat = self.v / (1 - self.b2 ** self.k)
        lr = self.lr * min(1.0, self.k / self.warmup) if self.warmup else self.lr
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class ListSink:
    def __init__(self, keep_steps=True):
        self.steps: List[TrainStepReport] = []
        self.snapshots: List[dict] = []
        self.keep_steps = keep_steps

    def on_step(self, rep: TrainStepReport):
        if self.keep_steps:
            self.steps.append(rep)

    def on_snapshot(self, row: dict):
        self.snapshots.append(row)

    def close(self):
        pass


STEP_COLUMNS = ("iter", "t", "r", "loss", "weight", "grad_norm", "mode")
SNAPSHOT_COLUMNS = ("iter", "sw_1step", "sw_2step", "bellman_residual")


class CsvSink(ListSink):
    """Append-only report CSV plus evaluation-snapshot CSV."""

    def __init__(self, steps_path, snapshots_path):
        super().__init__(keep_steps=False)
        self._fs = open(steps_path, "w", newline="")
        self._fe = open(snapshots_path, "w", newline="")
        self._ws, self._we = csv.writer(self._fs), csv.writer(self._fe)
        self._ws.writerow(STEP_COLUMNS)
        self._we.writerow(SNAPSHOT_COLUMNS)

    def on_step(self, rep):
        self._ws.writerow([rep.iter, repr(rep.t), repr(rep.r), repr(rep.loss), repr(rep.weight),
                           repr(rep.grad_norm), rep.mode])

    def on_snapshot(self, row):
        super().on_snapshot(row)
        self._we.writerow([row["iter"]] + [repr(row[k]) for k in SNAPSHOT_COLUMNS[1:]])
        self._fe.flush()

    def close(self):
        self._fs.close()
        self._fe.close()


@dataclass
class EvalSettings:
    every: int = 0                 # 0: no periodic snapshots
    n_samples: int = 2000
    projections: int = 64
    two_step_time: float = 1.5
    bellman_t: float = 1.0
    bellman_r: float = 0.5
    bellman_points: int = 32
    bellman_substeps: int = 128
    seed: int = 12345
    stop_sw_below: Optional[float] = None


@dataclass
class TrainResult:
    net: ConsistencyNet
    shadows: List[EmaShadow]
    theta_star: ConsistencyNet
    iters_done: int
    reached_at: Optional[int] = None
    snapshots: List[dict] = field(default_factory=list)

    def eval_net(self, plan: TrainPlan) -> ConsistencyNet:
        if plan.eval_weights == "ema" and self.shadows:
            return self.net.copy(self.shadows[0].params)
        return self.net


def evaluate_snapshot(net, schedule, oracle, ev: EvalSettings, iteration, data=None):
    from .metrics import sliced_wasserstein
    from .mdp import bellman_residual
    from .sampler import one_step, prior_sample, stochastic_multistep

    rng = np.random.default_rng(ev.seed)
    x_T = prior_sample(schedule, ev.n_samples, net.dim, rng)
    if data is None:
        data = oracle.sample_data(ev.n_samples, seed=rng)
    x1 = one_step(net, schedule, x_T)
    x2 = stochastic_multistep(net, schedule, x_T, [ev.two_step_time], None, rng)
    res = bellman_residual(net, schedule, oracle, ev.bellman_t, ev.bellman_r, ev.bellman_points,
                           ev.seed, ev.bellman_substeps) if ev.bellman_points else float("nan")
    return {"iter": iteration,
            "sw_1step": sliced_wasserstein(x1, data, ev.projections, ev.seed),
            "sw_2step": sliced_wasserstein(x2, data, ev.projections, ev.seed),
            "bellman_residual": res}


def train(net: ConsistencyNet, oracle: MixtureOracle, schedule: NoiseSchedule, plan: TrainPlan,
          iters: int, batch_size: int = 256, seed=0, sink=None,
          evaluation: Optional[EvalSettings] = None) -> TrainResult:
    """Run ``iters`` optimizer steps on ``net`` in place."""
    ss = np.random.SeedSequence(seed)
    data_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    sink = sink if sink is not None else ListSink(keep_steps=False)
    ev = evaluation or EvalSettings()
    opt = Adam(net.n_params, plan.lr, plan.betas, warmup=plan.warmup)
    shadows = [EmaShadow.of(net, d) for d in plan.ema_decays]
    pool = pool_labels = None
    if plan.target_mode == VARIANCE_REDUCED and plan.ref_source == "pool":
        pool, pool_labels = oracle.sample_data(plan.pool_size, seed=data_rng, return_labels=True)
    half = iters // 2
    star_params = None
    reached = None
    eval_data = None
    if ev.every:
        eval_data = oracle.sample_data(ev.n_samples, seed=np.random.default_rng(ev.seed + 1))

    it = 0
    for it in range(iters):
        if it == half:
            star_params = (shadows[0].params if shadows else net.params).copy()
        x0, labels = oracle.sample_data(batch_size, seed=data_rng, return_labels=True)
        if plan.theta_minus_mode == EMA:
            target_params = shadows[0].params
        else:
            target_params = net.params
        _, grad, rep = loss_and_grad(net, target_params.copy(), schedule, plan, x0,
                                     labels if (net.n_classes or plan.conditional) else None,
                                     noise_rng, it, oracle, pool, pool_labels)
        opt.step(net.params, grad)
        if not np.all(np.isfinite(net.params)):
            raise TrainingError(f"trainer.train: non-finite parameters after iter {it}")
        for sh in shadows:
            ema_update(sh, net)
        sink.on_step(rep)
        if ev.every and (it + 1) % ev.every == 0:
            res = TrainResult(net, shadows, net, it + 1)
            snap = evaluate_snapshot(res.eval_net(plan), schedule, oracle, ev, it + 1, eval_data)
            sink.on_snapshot(snap)
            if ev.stop_sw_below is not None and snap["sw_1step"] <= ev.stop_sw_below:
                reached = it + 1
                break
    else:
        it = iters
    done = it if reached is None else reached
    if star_params is None:
        star_params = (shadows[0].params if shadows else net.params).copy()
    sink.close()
    return TrainResult(net, shadows, net.copy(star_params), done, reached,
                       list(getattr(sink, "snapshots", [])))
