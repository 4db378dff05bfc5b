import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvp import autodiff as ad
from hvp.diffusion import (GmmOracleDenoiser, GmmPrior, NoiseSchedule, build_schedule,
                           reverse_sample, unguided_chain)
from hvp.errors import DimensionError, ParameterError
from hvp.gradcheck import directional_rel_err
from hvp.policies import (GuidanceConfig, NoiseStreams, ahvp_rollout, guided_step, make_policies,
                          replay_controls, sample_control, sample_initial_noise, unguided_rollout)


def _den(d=2, seed=0):
    rng = np.random.default_rng(seed)
    return GmmOracleDenoiser(GmmPrior(np.array([0.5, 0.5]), rng.uniform(-1, 1, (2, d)),
                                      np.array([0.1, 0.3])))


def _random_pols(d, c, seed, **kw):
    return make_policies(d, c, np.random.default_rng(seed), zero_last=False, scale=0.5,
                         step_hidden=(8,), noise_hidden=(8,), **kw)


def test_zero_noise_policy_is_identity():
    pols = make_policies(3, 2, np.random.default_rng(0))
    eps = np.random.default_rng(1).normal(size=(4, 3))
    x_T, off = sample_initial_noise(pols.noise, np.ones((4, 2)), eps)
    np.testing.assert_array_equal(x_T, eps)
    np.testing.assert_array_equal(off, 0.0)


def test_constant_noise_policy_shifts():
    pols = make_policies(3, 2, np.random.default_rng(0))
    net = pols.noise.net
    last = net.n_layers - 1
    c = np.array([0.5, -1.0, 2.0])
    net = net.with_params({f"noise.b{last}": c})
    eps = np.random.default_rng(1).normal(size=(4, 3))
    x_T, _ = sample_initial_noise(type(pols.noise)(net, 3), np.ones((4, 2)), eps)
    np.testing.assert_allclose(x_T, eps + c)


def test_noise_policy_dimension_check():
    pols = make_policies(3, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        sample_initial_noise(pols.noise, np.ones((1, 2)), np.ones((1, 4)))


def test_noise_offset_norm_gradient():
    pols = _random_pols(2, 2, 0)
    cond = np.random.default_rng(1).normal(size=(5, 2))
    eps = np.random.default_rng(2).normal(size=(5, 2))

    def f(p, tape=None):
        net = pols.noise.net.with_params(p)
        off = sample_initial_noise(type(pols.noise)(net, 2), cond, eps, tape)[1]
        return ad.sum(ad.square(off))

    tape = ad.Tape()
    g = ad.backward(tape, f(pols.noise.net.qualified(), tape))
    err = directional_rel_err(lambda p: float(ad.value(f(p))), g, pols.noise.net.qualified(),
                              np.random.default_rng(3))
    assert err < 1e-4


def test_zero_step_policy_gives_zero_control():
    pols = make_policies(2, 1, np.random.default_rng(0), stochastic=False)
    z = np.zeros((3, 2))
    u, mean, std = sample_control(pols.step, np.ones((3, 2)), z, z, np.ones((3, 1)), 4,
                                  build_schedule(), np.ones((3, 2)))
    np.testing.assert_array_equal(u, 0.0)
    assert std == 0.0


def test_control_std_is_kappa_times_noise_level():
    sched = NoiseSchedule(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.01]), 0.5)
    assert sched.policy_std(1, 0.05) == pytest.approx(0.05)


@settings(max_examples=20, deadline=None)
@given(t=st.integers(1, 8), seed=st.integers(0, 1000))
def test_reparameterization_and_deterministic_branch(t, seed):
    sched = build_schedule()
    rng = np.random.default_rng(seed)
    stoch = _random_pols(2, 1, seed)
    det = stoch.deterministic()
    x, up, ue, c = rng.normal(size=(4, 3, 2))[0], rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
    u0, mean, std = sample_control(stoch.step, x, up, ue, c, t, sched, np.zeros((3, 2)))
    np.testing.assert_array_equal(u0, mean)
    assert std == pytest.approx(0.05 * sched.s[t])
    noise = rng.normal(size=(3, 2))
    u1, _, _ = sample_control(stoch.step, x, up, ue, c, t, sched, noise)
    np.testing.assert_allclose(u1, mean + std * noise)
    ud, md, sd = sample_control(det.step, x, up, ue, c, t, sched, noise)
    np.testing.assert_array_equal(ud, mean)
    assert sd == 0.0


def test_zero_control_step_equals_unguided():
    den, sched = _den(), build_schedule()
    x = np.random.default_rng(0).normal(size=(4, 2))
    noise = np.random.default_rng(1).normal(size=(4, 2))
    res = guided_step(den, sched, 1.0, x, np.zeros_like(x), 5, noise)
    np.testing.assert_array_equal(res.mu_ctrl, res.mu_free)
    np.testing.assert_array_equal(res.x_prev, reverse_sample(den, sched, x, 5, noise))


def test_zero_gamma_step_equals_unguided():
    den, sched = _den(), build_schedule()
    rng = np.random.default_rng(0)
    x, u, noise = rng.normal(size=(3, 4, 2))
    res = guided_step(den, sched, 0.0, x, u, 3, noise)
    np.testing.assert_array_equal(res.x_prev, reverse_sample(den, sched, x, 3, noise))


@pytest.mark.parametrize("t", [1, 4, 8])
def test_controlled_mean_shift_matches_analytic_jacobian(t):
    sched = build_schedule()
    m, v, gamma = np.array([0.3, -0.5]), 0.4, 0.7
    den = GmmOracleDenoiser(GmmPrior(np.ones(1), m[None], np.array([v])))
    a, s = sched.a[t], sched.s[t]
    g = a * v / (a ** 2 * v + s ** 2)
    J = sched.a[t - 1] * g + sched.det_coef(t) / s * (1 - a * g)
    rng = np.random.default_rng(t)
    x, u = rng.normal(size=(2, 5, 2))
    res = guided_step(den, sched, gamma, x, u, t, np.zeros_like(x))
    np.testing.assert_allclose(res.mu_ctrl - res.mu_free, gamma * J * u, atol=1e-12)


def test_zero_policies_reproduce_unguided_chain():
    den, sched = _den(3), build_schedule()
    pols = make_policies(3, 2, np.random.default_rng(0), stochastic=False)
    cond = np.random.default_rng(1).normal(size=(6, 2))
    streams = NoiseStreams.from_seed(5, 6, 3, 8)
    tr = ahvp_rollout(pols, den, sched, GuidanceConfig(gamma=2.5), cond, streams)
    ref = unguided_chain(den, sched, streams.eps, streams.step)
    assert len(tr.states) == len(ref) == 9
    for a, b in zip(tr.states, ref):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(unguided_rollout(den, sched, 3, 6, streams).x0, ref[-1])


@pytest.mark.parametrize("record_kl,expected", [(False, 8), (True, 16)])
def test_ahvp_call_counts(record_kl, expected):
    den, sched = _den(), build_schedule()
    pols = _random_pols(2, 2, 0)
    tr = ahvp_rollout(pols, den, sched, GuidanceConfig(), np.ones((7, 2)), 3, record_kl=record_kl)
    c = tr.counter
    assert (c.noise_policy, c.step_policy, c.denoiser, c.inner_iterations) == (1, 8, expected, 0)


def test_unguided_call_counts():
    tr = unguided_rollout(_den(), build_schedule(), 2, 5, 0)
    assert (tr.counter.policy_total, tr.counter.denoiser) == (0, 8)


def test_rollout_is_deterministic_in_seed():
    den, sched = _den(), build_schedule()
    pols = _random_pols(2, 2, 0)
    a = ahvp_rollout(pols, den, sched, GuidanceConfig(), np.ones((3, 2)), 42)
    b = ahvp_rollout(pols, den, sched, GuidanceConfig(), np.ones((3, 2)), 42)
    for x, y in zip(a.states, b.states):
        np.testing.assert_array_equal(x, y)


@given(T=st.integers(2, 30), kappa=st.floats(0.01, 1.0))
def test_sigma_bar_strictly_decreasing(T, kappa):
    den, sched = _den(), build_schedule(T)
    pols = make_policies(2, 1, np.random.default_rng(0), kappa=kappa, step_hidden=(2,),
                         noise_hidden=(2,))
    tr = ahvp_rollout(pols, den, sched, GuidanceConfig(), np.ones((2, 1)), 0, record_kl=False)
    assert np.all(np.diff(tr.sigma_bar) < 0)


def test_replay_reproduces_on_policy_values():
    den, sched = _den(), build_schedule(4)
    pols = _random_pols(2, 2, 1)
    cond = np.random.default_rng(2).normal(size=(3, 2))
    streams = NoiseStreams.from_seed(0, 3, 2, 4)
    ref = ahvp_rollout(pols, den, sched, GuidanceConfig(), cond, streams)
    rep = replay_controls(pols, den, sched, GuidanceConfig(), cond, streams, ref)
    for a, b in zip(ref.controls, rep.controls):
        np.testing.assert_allclose(ad.value(a), ad.value(b), atol=1e-14)
    for a, b in zip(ref.mu_ctrl, rep.mu_ctrl):
        np.testing.assert_allclose(ad.value(a), ad.value(b), atol=1e-14)


def test_negative_gamma_rejected():
    with pytest.raises(ParameterError):
        GuidanceConfig(gamma=-1.0)
