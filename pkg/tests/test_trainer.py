import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sctlab.metrics import sliced_wasserstein
from sctlab.net import ConsistencyNet
from sctlab.oracle import MixtureOracle
from sctlab.sampler import make_edges, one_step, prior_sample
from sctlab.schedule import NoiseSchedule
from sctlab.trainer import (
    CsvSink, ListSink, TrainingError, TrainPlan, build_step, fixed_partition_r, loss_and_grad,
    loss_from_context, loss_weight, phase_floor, r_of, sample_t, target_output, train,
)

VE = NoiseSchedule.ve()


def test_sample_t_examples():
    rng = np.random.default_rng(0)
    t = sample_t(TrainPlan(p_std=0.0), VE, rng, 100)
    np.testing.assert_allclose(t, math.exp(-1.1))
    draws = sample_t(TrainPlan(), VE, rng, 100_000)
    assert np.median(draws) == pytest.approx(math.exp(-1.1), rel=0.02)
    assert draws.min() >= VE.t_min and draws.max() <= VE.t_max


def test_r_of_examples():
    assert r_of(TrainPlan(), VE, 1.0, 0) == VE.t_min
    assert r_of(TrainPlan(q=4, d=1000), VE, 1.0, 1000) == pytest.approx(0.75)
    phased = TrainPlan(edges=[80.0, 0.5, VE.t_min])
    assert r_of(phased, VE, 0.8, 0) == pytest.approx(0.5)
    assert phase_floor(phased, VE, 0.3) == VE.t_min


def test_fixed_partition_examples():
    assert fixed_partition_r(1.0, 256) == pytest.approx(255 / 256)
    assert fixed_partition_r(0.7, 1, floor=0.002) == 0.002
    assert fixed_partition_r(0.5, 2) == pytest.approx(0.25)
    plan = TrainPlan(fixed_partition=256)
    t = np.array([0.01, 1.0, 40.0])
    np.testing.assert_allclose(r_of(plan, VE, t, 12345), t * 255 / 256)
    with pytest.raises(ValueError):
        fixed_partition_r(1.0, 0)


@settings(max_examples=80, deadline=None)
@given(t=st.floats(0.003, 80.0), it1=st.integers(0, 20_000), it2=st.integers(0, 20_000),
       q=st.floats(1.01, 4.0), d=st.integers(1, 500), sigmoid=st.booleans(), phased=st.booleans())
def test_r_of_monotone_and_bounded(t, it1, it2, q, d, sigmoid, phased):
    edges = list(make_edges(VE, 4, "uniform_lambda")) if phased else None
    plan = TrainPlan(q=q, d=d, n_fn="sigmoid" if sigmoid else "constant", edges=edges)
    lo, hi = sorted([it1, it2])
    r_lo, r_hi = r_of(plan, VE, t, lo), r_of(plan, VE, t, hi)
    assert r_lo <= r_hi
    floor = phase_floor(plan, VE, t)
    assert floor <= r_lo <= t
    assert r_hi < t or r_hi == floor == t


def test_r_of_converges_to_t():
    plan = TrainPlan(q=1.25, d=200)
    it = int(64 * 200 * math.log(1e6) / math.log(1.25))
    for t in [0.01, 1.0, 50.0]:
        assert t - r_of(plan, VE, t, it) < 1e-6 * t


def test_weight_examples():
    plan = TrainPlan()
    assert loss_weight(plan, 1.0, 0.75) == pytest.approx(3.9984, abs=1e-4)
    t = np.exp(np.random.default_rng(1).uniform(-6, 4, 1000))
    assert np.all(loss_weight(plan, t, t) <= 1 / plan.delta)
    # with delta -> 0 and r = a t the weight splits into (1/t) (1/(1-a))
    a = 0.3
    w = 1.0 / (t - a * t)
    np.testing.assert_allclose(w, (1 / t) * (1 / (1 - a)), rtol=1e-14)


def _batch(n=64, seed=0):
    o = MixtureOracle.two_gaussians(1.0, 0.25)
    return o, o.sample_data(n, seed=seed)


def test_one_shot_x_r_is_forward_marginal():
    o, x0 = _batch()
    net = ConsistencyNet(1, VE, 0.5, hidden=(8,), seed=0)
    plan = TrainPlan(target_mode="one_shot", fixed_partition=4)
    ctx = build_step(net, VE, plan, x0, None, np.random.default_rng(3), 0)
    eps = (ctx.x_t - x0) / ctx.t[:, None]
    np.testing.assert_allclose(ctx.x_r, x0 + ctx.r[:, None] * eps, atol=1e-12)


def test_loss_zero_when_t_equals_r():
    o, x0 = _batch()
    net = ConsistencyNet(1, VE, 0.5, hidden=(8,), seed=0)
    plan = TrainPlan(p_mean=math.log(VE.t_min) - 1.0, p_std=0.0)  # clamps to t_min
    loss, grad, rep = loss_and_grad(net, net.params, VE, plan, x0, seed=0)
    assert loss == 0.0 and np.all(grad == 0)
    assert rep.t == rep.r


def test_shared_noise_reduces_to_target_eps_for_one_shot():
    o, x0 = _batch()
    net = ConsistencyNet(1, VE, 0.5, hidden=(8,), seed=1)
    a = loss_and_grad(net, net.params, VE, TrainPlan(target_mode="one_shot"), x0, seed=5, iteration=900)
    b = loss_and_grad(net, net.params, VE, TrainPlan(target_mode="one_shot", xr_mode="shared_noise"),
                      x0, seed=5, iteration=900)
    assert a[0] == pytest.approx(b[0], rel=1e-10)


def _full_loss_fd(plan, dim=1, hidden=(2,), n_freq=1, labels=None, n_classes=0, seed=0):
    rng = np.random.default_rng(seed)
    o = MixtureOracle.ring(4, 1.0, 0.2) if dim == 2 else MixtureOracle.two_gaussians(1.0, 0.25)
    x0 = o.sample_data(16, seed=rng)
    net = ConsistencyNet(dim, VE, 0.6, hidden=hidden, n_freq=n_freq, n_classes=n_classes,
                         class_dim=2, seed=seed)
    net.params += 0.3 * rng.standard_normal(net.n_params)
    ctx = build_step(net, VE, plan, x0, labels, np.random.default_rng(seed + 1), 700, o)
    target = target_output(net, VE, plan, ctx, net.params.copy())
    _, grad = loss_from_context(net, VE, plan, ctx, net.params, target)
    worst = 0.0
    h = 1e-5
    for k in range(net.n_params):
        e = np.zeros(net.n_params)
        e[k] = h
        lp, _ = loss_from_context(net, VE, plan, ctx, net.params + e, target, want_grad=False)
        lm, _ = loss_from_context(net, VE, plan, ctx, net.params - e, target, want_grad=False)
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-10))
    return worst, net.n_params


@pytest.mark.parametrize("plan", [
    TrainPlan(),
    TrainPlan(target_mode="one_shot", loss="squared_l2"),
    TrainPlan(xr_mode="shared_noise", fixed_partition=8),
    TrainPlan(edges=[80.0, 1.0, 0.1, 0.002]),
], ids=["sct", "ct_l2", "shared_noise", "phased"])
def test_full_loss_gradient_micro_net(plan):
    worst, n = _full_loss_fd(plan)
    assert n <= 12
    assert worst < 1e-4


def test_full_loss_gradient_conditional():
    labels = np.array([0, 1] * 8)
    worst, _ = _full_loss_fd(TrainPlan(conditional=True), dim=2, hidden=(3,), labels=labels,
                             n_classes=4)
    assert worst < 1e-4


def test_teacher_mode_needs_oracle():
    o, x0 = _batch()
    net = ConsistencyNet(1, VE, 0.5, hidden=(4,))
    with pytest.raises(TrainingError):
        loss_and_grad(net, net.params, VE, TrainPlan(target_mode="teacher_oracle"), x0)


def test_nonfinite_loss_names_t_and_r():
    o, x0 = _batch()
    net = ConsistencyNet(1, VE, 0.5, hidden=(4,))
    net.params[:] = np.nan
    with pytest.raises(TrainingError, match="t="):
        loss_and_grad(net, np.zeros(net.n_params), VE, TrainPlan(fixed_partition=2), x0)


def test_empty_batch():
    net = ConsistencyNet(1, VE, 0.5, hidden=(4,))
    with pytest.raises(TrainingError):
        loss_and_grad(net, net.params, VE, TrainPlan(), np.zeros((0, 1)))


def test_iters_zero_leaves_net():
    o = MixtureOracle.two_gaussians()
    net = ConsistencyNet(1, VE, 0.5, hidden=(8,), seed=2)
    before = net.params.copy()
    res = train(net, o, VE, TrainPlan(), 0, 32, seed=0)
    assert np.array_equal(net.params, before)
    assert res.iters_done == 0
    assert np.array_equal(res.theta_star.params, before)


def _short_run(plan, seed=0, iters=30, width=16):
    o = MixtureOracle.ring(4, 1.0, 0.2)
    net = ConsistencyNet(2, VE, o.sigma_data(), hidden=(width, width), seed=seed)
    sink = ListSink()
    res = train(net, o, VE, plan, iters, 32, seed=seed, sink=sink)
    return res, sink


def test_train_determinism():
    a, sa = _short_run(TrainPlan(), seed=3)
    b, sb = _short_run(TrainPlan(), seed=3)
    assert np.array_equal(a.net.params, b.net.params)
    assert np.array_equal(a.shadows[0].params, b.shadows[0].params)
    assert [r.loss for r in sa.steps] == [r.loss for r in sb.steps]


def test_single_reference_matches_one_shot_training():
    a, _ = _short_run(TrainPlan(ref_size=1), seed=4)
    b, _ = _short_run(TrainPlan(target_mode="one_shot"), seed=4)
    assert np.array_equal(a.net.params, b.net.params)


def test_reports_bounded_and_finite():
    _, sink = _short_run(TrainPlan(), iters=50)
    for rep in sink.steps:
        assert math.isfinite(rep.loss) and math.isfinite(rep.grad_norm)
        assert rep.weight <= 1 / 1e-4
        assert rep.mode == "variance_reduced"


def test_theta_star_is_half_way_ema():
    o = MixtureOracle.ring(4, 1.0, 0.2)
    net = ConsistencyNet(2, VE, o.sigma_data(), hidden=(8,), seed=0)
    full = train(net, o, VE, TrainPlan(), 20, 16, seed=1)
    net2 = ConsistencyNet(2, VE, o.sigma_data(), hidden=(8,), seed=0)
    half = train(net2, o, VE, TrainPlan(), 10, 16, seed=1)
    # the first ten steps use the same random streams either way
    assert np.array_equal(full.theta_star.params, half.shadows[0].params)


def test_csv_sink(tmp_path):
    o = MixtureOracle.ring(4, 1.0, 0.2)
    net = ConsistencyNet(2, VE, o.sigma_data(), hidden=(8,), seed=0)
    from sctlab.trainer import EvalSettings

    sink = CsvSink(tmp_path / "steps.csv", tmp_path / "snap.csv")
    train(net, o, VE, TrainPlan(), 10, 16, seed=0, sink=sink,
          evaluation=EvalSettings(every=5, n_samples=200, bellman_points=4, bellman_substeps=16))
    steps = (tmp_path / "steps.csv").read_text().splitlines()
    assert steps[0] == "iter,t,r,loss,weight,grad_norm,mode" and len(steps) == 11
    snaps = (tmp_path / "snap.csv").read_text().splitlines()
    assert snaps[0] == "iter,sw_1step,sw_2step,bellman_residual" and len(snaps) == 3


def test_single_gaussian_training_reaches_threshold():
    o = MixtureOracle.single_gaussian()
    net = ConsistencyNet(1, VE, o.sigma_data(), seed=0)
    # a 2000-step run needs the shrink to finish early and a short EMA window
    plan = TrainPlan(q=1.5, d=100, ema_decays=(0.99,))
    res = train(net, o, VE, plan, 2000, 256, seed=0)
    rng = np.random.default_rng(7)
    x = one_step(res.eval_net(plan), VE, prior_sample(VE, 10_000, 1, rng))
    assert sliced_wasserstein(x, o.sample_data(10_000, seed=rng), 128, 0) < 0.1


def test_sct_not_worse_than_ct_fixed_partition():
    """Fixed partition dt = t/256 on two Gaussians, batch 128, median of 5 seeds."""
    o = MixtureOracle.two_gaussians(1.0, 0.25)
    rng = np.random.default_rng(99)
    x_T = prior_sample(VE, 10_000, 1, rng)
    data = o.sample_data(10_000, seed=rng)
    finals = {}
    for mode in ["variance_reduced", "one_shot"]:
        plan = TrainPlan(fixed_partition=256, target_mode=mode)
        sw = []
        for seed in range(5):
            net = ConsistencyNet(1, VE, o.sigma_data(), hidden=(32, 32), seed=seed)
            res = train(net, o, VE, plan, 1500, 128, seed=seed)
            sw.append(sliced_wasserstein(one_step(res.eval_net(plan), VE, x_T), data, 128, 0))
        finals[mode] = float(np.median(sw))
    assert finals["variance_reduced"] <= finals["one_shot"]
