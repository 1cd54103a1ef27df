import numpy as np
import pytest

from sctlab.metrics import sliced_wasserstein
from sctlab.net import ConsistencyNet
from sctlab.oracle import MixtureOracle, OracleDenoiser
from sctlab.sampler import (
    GuidedDenoiser, SamplePlan, SamplerError, draw, edge_visits, guided_predict, make_edges,
    one_step, phased_sample, phased_step, prior_sample, stochastic_multistep, validate_edges,
)
from sctlab.schedule import NoiseSchedule

VE = NoiseSchedule.ve()


class Const:
    dim = 1

    def __init__(self, value):
        self.value = value

    def predict_x0(self, x, t, label=None):
        return np.full(np.shape(x), self.value, dtype=float)


def small_net(seed=0, **kw):
    return ConsistencyNet(2, VE, 0.6, hidden=(16, 16), seed=seed, **kw)


def test_phased_step_examples():
    x = np.array([[1.0]])
    assert phased_step(Const(0.2), VE, x, 1.0, 0.5)[0, 0] == pytest.approx(0.6)
    assert phased_step(Const(0.2), VE, x, 1.0, 0.0)[0, 0] == 0.2
    assert phased_step(Const(0.2), VE, x, 1.0, 1.0)[0, 0] == 1.0
    net = small_net()
    xs = np.random.default_rng(0).normal(size=(50, 2)) * 3
    np.testing.assert_array_equal(phased_step(net, VE, xs, 3.0, 0.0), net.predict_x0(xs, 3.0))
    np.testing.assert_array_equal(phased_step(net, VE, xs, 3.0, 3.0), xs)
    with pytest.raises(SamplerError):
        phased_step(net, VE, xs, 1.0, 2.0)


def test_phased_step_vp_matches_general_form():
    sched = NoiseSchedule.vp()
    x, d, t, s = np.array([[0.7]]), 0.1, 0.8, 0.3
    expect = sched.alpha(s) * d + sched.sigma(s) * (x - sched.alpha(t) * d) / sched.sigma(t)
    np.testing.assert_allclose(phased_step(Const(d), sched, x, t, s), expect, rtol=1e-14)


def test_edge_visit_examples():
    np.testing.assert_allclose(edge_visits([1, 3 / 6, 0], 2 / 3), [1, 2 / 6, 0])
    np.testing.assert_allclose(edge_visits([1, 2 / 3, 1 / 3, 0], 0.9), [1, 0.6, 0.3, 0])
    assert np.array_equal(edge_visits([1, 0.5, 0], 1.0), [1, 0.5, 0])
    with pytest.raises(SamplerError):
        edge_visits([1, 0.5, 0], 1.5)


def test_edge_validation():
    validate_edges(make_edges(VE, 5), VE)
    validate_edges(make_edges(VE, 5, "uniform_lambda"), VE)
    for bad in ([1.0], [0.5, 1.0], [1.0, 1.0, 0.0]):
        with pytest.raises(SamplerError):
            validate_edges(bad)
    with pytest.raises(SamplerError):
        validate_edges([40.0, 0.002], VE)
    with pytest.raises(SamplerError):
        SamplePlan(mode="phased_deterministic", eta=0.0)


def test_eta_one_bit_identical():
    net = small_net(1)
    edges = make_edges(VE, 5, "uniform_lambda")
    x_T = prior_sample(VE, 200, 2, 0)
    manual = x_T.copy()
    for t, s in zip(edges[:-1], edges[1:]):
        manual = phased_step(net, VE, manual, t, s)
    assert np.array_equal(phased_sample(net, VE, x_T, edges, 1.0), manual)


def test_eta_visits_and_path():
    net = small_net(2)
    edges = make_edges(VE, 4)
    x, visits, path = phased_sample(net, VE, prior_sample(VE, 10, 2, 1), edges, 0.9,
                                    return_path=True)
    assert visits[0] == VE.t_max and visits[-1] == VE.t_min
    np.testing.assert_allclose(visits[1:-1], 0.9 * edges[1:-1])
    assert len(path) == len(edges) and np.array_equal(path[-1], x)


def test_eta_continuity():
    net = small_net(3)
    edges = make_edges(VE, 4, "uniform_lambda")
    x_T = prior_sample(VE, 100, 2, 2)
    etas = np.linspace(0.5, 1.0, 51)
    outs = [phased_sample(net, VE, x_T, edges, e) for e in etas]
    jumps = np.array([np.max(np.abs(b - a)) for a, b in zip(outs[:-1], outs[1:])])
    assert jumps.max() <= 10 * np.median(jumps)


class PosteriorMean:
    """Tweedie denoiser x - t * eps(x, t); phased steps with it are DDIM steps."""
    dim = 1

    def __init__(self, oracle):
        self.oracle = oracle

    def predict_x0(self, x, t, label=None):
        return x - t * self.oracle.exact_epsilon(VE, x, t)


def test_phased_oracle_transport_first_order():
    g = MixtureOracle.single_gaussian()
    stub = PosteriorMean(g)
    x_T = np.array([[40.0], [-25.0]])
    exact = x_T * np.sqrt((1 + VE.t_min ** 2) / (1 + VE.t_max ** 2))
    counts = np.array([8, 16, 32, 64])
    errs = []
    for n in counts:
        out = phased_sample(stub, VE, x_T, make_edges(VE, n + 1, "uniform_lambda"), 1.0)
        errs.append(np.max(np.abs(out - exact)))
    slope = -np.polyfit(np.log(counts), np.log(errs), 1)[0]
    assert 0.9 <= slope <= 1.1


def test_guidance_examples():
    x = np.zeros((1, 1))
    assert guided_predict(Const(1.0), Const(0.6), VE, x, 1.0, None, 1.2)[0, 0] == pytest.approx(1.08)
    net, star = small_net(4), small_net(5)
    xs = np.random.default_rng(1).normal(size=(30, 2))
    np.testing.assert_array_equal(GuidedDenoiser(net, star, 1.0).predict_x0(xs, 2.0),
                                  net.predict_x0(xs, 2.0))
    np.testing.assert_array_equal(GuidedDenoiser(net, star, 0.0).predict_x0(xs, 2.0),
                                  star.predict_x0(xs, 2.0))


def test_guidance_affine_in_omega():
    net, star = small_net(6), small_net(7)
    xs = np.random.default_rng(2).normal(size=(30, 2))
    d = {w: GuidedDenoiser(net, star, w).predict_x0(xs, 0.7) for w in (0.5, 1.3, 2.1)}
    np.testing.assert_allclose(d[1.3] - d[0.5], d[2.1] - d[1.3], atol=1e-12)


def test_guidance_errors():
    with pytest.raises(SamplerError):
        GuidedDenoiser(small_net(), ConsistencyNet(2, VE, 0.6, hidden=(8,)), 1.2)
    with pytest.raises(SamplerError):
        GuidedDenoiser(small_net(), small_net(1), -0.5)


def test_one_step_oracle_stub_single_gaussian():
    g = MixtureOracle.single_gaussian()
    stub = OracleDenoiser(g, VE, 256)
    rng = np.random.default_rng(0)
    x = one_step(stub, VE, prior_sample(VE, 10_000, 1, rng))
    assert sliced_wasserstein(x, g.sample_data(10_000, seed=rng), 128, 0) < 0.03


def test_one_step_is_prediction_at_t_max():
    net = small_net(8)
    x_T = prior_sample(VE, 20, 2, 3)
    a, b = one_step(net, VE, x_T), one_step(net, VE, x_T)
    assert np.array_equal(a, b)
    assert np.array_equal(a, net.predict_x0(x_T, VE.t_max))


def test_stochastic_multistep():
    net = small_net(9)
    x_T = prior_sample(VE, 20, 2, 4)
    assert np.array_equal(stochastic_multistep(net, VE, x_T, [], seed=0), one_step(net, VE, x_T))
    zero = NoiseSchedule(t_min=0.0)
    net0 = ConsistencyNet(2, zero, 0.6, hidden=(8,), seed=1)
    out = stochastic_multistep(net0, zero, x_T, [0.0], seed=0)
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, net0.predict_x0(one_step(net0, zero, x_T), 0.0))
    with pytest.raises(SamplerError):
        stochastic_multistep(net, VE, x_T, [0.5, 1.0])


def test_draw_modes():
    net, star = small_net(10), small_net(11)
    for plan in [SamplePlan(), SamplePlan("stochastic_multistep", times=[1.0]),
                 SamplePlan("phased_deterministic", edges=make_edges(VE, 4), eta=0.9),
                 SamplePlan(omega=1.2)]:
        a = draw(net, VE, plan, 50, seed=3, net_star=star)
        b = draw(net, VE, plan, 50, seed=3, net_star=star)
        assert a.shape == (50, 2) and np.array_equal(a, b)
    with pytest.raises(SamplerError):
        draw(net, VE, SamplePlan(omega=1.2), 5, seed=0)
    with pytest.raises(SamplerError):
        draw(net, VE, SamplePlan("phased_deterministic"), 5, seed=0)
