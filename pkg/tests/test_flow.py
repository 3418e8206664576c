import math

import numpy as np
import pytest

from conftest import central_fd, rel_err
from fields import LinearGaussianField
from spatial_lab.errors import DomainError
from spatial_lab.flow import (
    LowRankAdapter,
    Policy,
    SdeSchedule,
    adapter_grads,
    apply_adapter,
    em_update,
    evaluate_policy,
    fm_loss_and_grads,
    fm_pretrain_step,
    init_adapter,
    init_velocity_net,
    ode_sample,
    sample_batch,
    sde_step,
    transition_logprob,
    transition_logprob_rows,
    velocity_input_dim,
)
from spatial_lab.forge import GrammarConfig, generate_prompt
from spatial_lab.numerics import AdamState, Mlp, RngStream, backward_trace, forward_trace, init_mlp
from spatial_lab.scenes import embed_prompt

# frozen from tests/oracles.py
EM_MEAN_EXAMPLE = 0.9
LOGPDF_MEAN_D1_STD1 = -0.91893853320467274
LN2 = 0.69314718055994531
VAR_T6_CAPPED = 0.85992146015280511
VAR_T6_LITERAL = 379.70506766720333


def one(x):
    return np.array([[x]], dtype=float)


# --- single steps ----------------------------------------------------------

def test_hand_evaluated_step():
    x_next, mean, std = em_update(one(1.0), one(0.0), 0.5, -0.1, 1.0, one(0.0))
    assert mean[0, 0] == pytest.approx(EM_MEAN_EXAMPLE, abs=1e-15)
    assert x_next[0, 0] == mean[0, 0]
    assert std[0] == pytest.approx(math.sqrt(0.1), abs=1e-15)


def test_zero_sigma_is_euler():
    x, v = RngStream(1).normal((5, 3)), RngStream(2).normal((5, 3))
    x_next, _, _ = em_update(x, v, 0.4, -0.2, 0.0, RngStream(3).normal((5, 3)))
    assert np.array_equal(x_next, x + v * -0.2)


def test_sde_step_domain():
    f = LinearGaussianField(2)
    with pytest.raises(DomainError):
        sde_step(f, np.zeros((1, 2)), 0.5, 0.1, 0.5, np.zeros((1, 2)), None)
    with pytest.raises(DomainError):
        sde_step(f, np.zeros((1, 2)), 1.0, -0.1, 0.5, np.zeros((1, 2)), None)


# --- log densities ---------------------------------------------------------

def test_logprob_at_mean():
    lp = transition_logprob_rows(one(0.3), one(0.3), np.array([1.0]))
    assert lp[0] == pytest.approx(LOGPDF_MEAN_D1_STD1, abs=1e-14)


def test_doubling_std_costs_ln2_per_dim():
    m = RngStream(4).normal((3, 5))
    a = transition_logprob_rows(m, m, np.full(3, 0.2))
    b = transition_logprob_rows(m, m, np.full(3, 0.4))
    np.testing.assert_allclose(a - b, 5 * LN2, rtol=0, atol=1e-12)


def test_recorded_noise_density():
    f = LinearGaussianField(3)
    sched = SdeSchedule(5, 0.7)
    batch = sample_batch(f, np.zeros((4, 0)), sched, RngStream(5))
    d = 3
    for j in range(sched.steps):
        lp = transition_logprob(f, batch.embs, batch.states[j], batch.states[j + 1], batch.ts[j], batch.dts[j], batch.sigmas[j])
        std = batch.sigmas[j] * math.sqrt(abs(batch.dts[j]))
        eps = batch.noise[j]
        expect = -0.5 * np.sum(eps**2, axis=1) - d * math.log(std) - 0.5 * d * math.log(2 * math.pi)
        np.testing.assert_allclose(lp, expect, rtol=1e-12, atol=1e-10)


def test_zero_sigma_density_is_rejected():
    with pytest.raises(DomainError):
        transition_logprob(LinearGaussianField(), None, one(0), one(0), 0.5, -0.1, 0.0)


# --- trajectories ----------------------------------------------------------

def test_zero_noise_schedule_matches_ode_bitwise():
    f = LinearGaussianField(2)
    x1 = RngStream(6).normal((50, 2))
    sched = SdeSchedule(8, 0.0)
    sde = sample_batch(f, np.zeros((50, 0)), sched, RngStream(7), x_init=x1)
    assert np.array_equal(sde.states, ode_sample(f, None, sched, x1))


def test_sampling_is_deterministic():
    f = LinearGaussianField(2)
    a = sample_batch(f, np.zeros((3, 0)), SdeSchedule(), RngStream(8))
    b = sample_batch(f, np.zeros((3, 0)), SdeSchedule(), RngStream(8))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.means, b.means)


def test_coarse_grid_variance_matches_exact_recursion():
    f = LinearGaussianField(1)
    x = sample_batch(f, np.zeros((100_000, 0)), SdeSchedule(6, 0.7), RngStream(9)).final
    assert abs(x.var() - VAR_T6_CAPPED) < 0.02


def test_literal_clamp_blows_up_at_six_steps():
    f = LinearGaussianField(1)
    sched = SdeSchedule(6, 0.7, sigma_t_max=1 - 1e-3)
    x = sample_batch(f, np.zeros((100_000, 0)), sched, RngStream(10)).final
    assert x.var() == pytest.approx(VAR_T6_LITERAL, rel=0.05)


def test_sigma_schedule():
    s = SdeSchedule(6, 0.7)
    g = s.grid()
    assert g[0] == 1 - 1e-3 and g[-1] == pytest.approx(1e-3)
    assert s.sigma(g[0]) == s.sigma(g[1])
    assert s.sigma(0.5) == pytest.approx(0.7)


# --- adapter ---------------------------------------------------------------

def test_fresh_adapter_preserves_outputs():
    net = init_velocity_net(4, RngStream(11), (16, 16))
    ad = init_adapter(net, 4, RngStream(12))
    x = RngStream(13).normal((6, net.in_dim))
    assert np.array_equal(apply_adapter(net, ad)(x), net(x))


def test_full_rank_adapter_spans_any_delta():
    w0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    net = Mlp([w0], [np.zeros(2)])
    delta = np.array([[0.5, -1.0], [2.0, 0.25]])
    ad = LowRankAdapter([np.eye(2)], [delta / 2.0], alpha=4.0)  # scale 2
    np.testing.assert_allclose(apply_adapter(net, ad).weights[0], w0 + delta, rtol=0, atol=1e-15)


def test_adapter_grads_match_finite_differences():
    net = init_mlp([3, 5, 2], RngStream(14))
    ad = init_adapter(net, 2, RngStream(15), alpha=3.0)
    ad = ad.with_arrays([a + 0.1 * RngStream(16, i).normal(a.shape) for i, a in enumerate(ad.arrays())])
    x, up = RngStream(17).normal((4, 3)), RngStream(18).normal((4, 2))
    arrays = ad.arrays()

    def f():
        return float(np.sum(apply_adapter(net, ad.with_arrays(arrays))(x) * up))

    eff = apply_adapter(net, ad)
    acts = forward_trace(eff, x)
    g = adapter_grads(ad, backward_trace(eff, acts, up))
    assert rel_err(g, central_fd(f, arrays)) <= 1e-6
    assert len(g) == len(ad.arrays())


# --- flow matching ---------------------------------------------------------

def test_fm_grads_match_finite_differences():
    net = init_mlp([2 + 1 + 3, 6, 2], RngStream(19))
    embs, x0, x1 = (RngStream(20, i).normal((5, d)) for i, d in enumerate((3, 2, 2)))
    t = RngStream(21).uniform(5)
    _, g = fm_loss_and_grads(net, embs, x0, x1, t)
    arrays = net.arrays()
    fd = central_fd(lambda: fm_loss_and_grads(net, embs, x0, x1, t)[0], arrays)
    assert rel_err(g.arrays(), fd) <= 1e-6


def test_equal_endpoints_give_zero_target():
    net = Mlp([np.zeros((2, 2 + 1 + 1))], [np.zeros(2)])
    x0 = RngStream(22).normal((3, 2))
    loss, _ = fm_loss_and_grads(net, np.zeros((3, 1)), x0, x0, np.full(3, 0.3))
    assert loss == 0.0


def test_single_point_overfits():
    net = init_mlp([2 + 1 + 1, 2], RngStream(23))  # linear
    x0 = np.array([[0.3, 0.7]])
    x1 = np.array([[-0.4, 1.1]])
    state = AdamState.zeros_like(net.arrays())
    stream = RngStream(24)
    first = None
    for _ in range(1500):
        loss, net, state = fm_pretrain_step(net, np.ones((1, 1)), x0, stream, state, 1e-2, x1=x1)
        first = first if first is not None else loss
    assert loss < 1e-4 * first


def test_pretrain_step_deterministic():
    net = init_mlp([2 + 1 + 1, 4, 2], RngStream(25))
    args = (np.ones((8, 1)), RngStream(26).uniform((8, 2)))
    a = fm_pretrain_step(net, *args, RngStream(27), AdamState.zeros_like(net.arrays()), 1e-3)[0]
    b = fm_pretrain_step(net, *args, RngStream(27), AdamState.zeros_like(net.arrays()), 1e-3)[0]
    assert a == b


def test_evaluate_policy_report():
    net = init_velocity_net(4, RngStream(28), (16,))
    prompts = [generate_prompt(RngStream(29, i), GrammarConfig()) for i in range(5)]
    rep = evaluate_policy(Policy(net), prompts, SdeSchedule(4), RngStream(30), samples_per_prompt=3)
    assert 0 <= rep["oracle_mean"] <= 1 and rep["n_prompts"] == 5
    assert rep == evaluate_policy(Policy(net), prompts, SdeSchedule(4), RngStream(30), samples_per_prompt=3)
    assert velocity_input_dim(4) == 8 + 1 + embed_prompt(prompts[0]).size
