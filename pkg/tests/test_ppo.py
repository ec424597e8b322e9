import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcgen.nn import Adam, Layout, init_network
from lcgen.ppo import (
    PPOSettings, ReplayBuffer, RolloutBatch, TrainingError, apply_resets, compute_gae, leaky_bounds,
    leaky_surrogate, normalize_advantages, policy_gradients, ppo_update,
)
from lcgen.sim import ACTION_BOUNDS, scale_features
from lcgen.trainer import sample_actions
from reference_ppo import reference_clipped_ppo

LAYOUT = Layout(embed_dim=8, hidden=(16, 16))


def test_gae_examples():
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.2, -0.1])
    d = np.array([False, False, True])
    adv, ret = compute_gae(r, v, d, 0.0, gamma=1.0, lam=1.0)
    np.testing.assert_allclose(adv, [6 - 0.5, 5 - 0.2, 3 + 0.1])
    adv, _ = compute_gae([2.0], [0.7], [True], 9.9)
    assert adv[0] == pytest.approx(2.0 - 0.7)
    g, lam = 0.9, 0.8
    adv, ret = compute_gae(r, v, [False, False, False], 0.4, gamma=g, lam=lam)
    d2 = 3 + g * 0.4 - (-0.1)
    d1 = 2 + g * -0.1 - 0.2
    d0 = 1 + g * 0.2 - 0.5
    a2 = d2
    a1 = d1 + g * lam * a2
    a0 = d0 + g * lam * a1
    np.testing.assert_allclose(adv, [a0, a1, a2], atol=1e-12)
    np.testing.assert_allclose(ret, adv + v)
    with pytest.raises(ValueError):
        compute_gae([], [], [], 0.0)


def test_gae_episode_boundary_in_batch():
    r = np.array([[1.0], [1.0]])
    adv, _ = compute_gae(r, np.zeros((2, 1)), np.array([[True], [False]]), np.array([5.0]), 1.0, 1.0)
    np.testing.assert_allclose(adv[:, 0], [1.0, 6.0])


def test_leaky_bounds_examples():
    assert leaky_bounds(1.7, 0.2, 0.0) == pytest.approx((0.8, 1.2))
    assert leaky_bounds(1.0, 0.2, 0.01) == pytest.approx((0.802, 1.198))
    assert leaky_bounds(1.5, 0.2, 0.01)[1] == pytest.approx(1.203)


def test_surrogate_examples():
    v, d = leaky_surrogate(1.1, 2.0, 0.2, 0.01)
    assert v == 2.2 and d == 2.0
    v, d = leaky_surrogate(1.5, 1.0, 0.2, 0.01)
    assert v == pytest.approx(1.203) and d == pytest.approx(0.01)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 5), st.floats(0.01, 0.99), st.floats(0, 0.99))
def test_bounds_continuity_and_order(r, eps, alpha):
    lo, hi = leaky_bounds(r, eps, alpha)
    assert lo < hi
    lo2, hi2 = leaky_bounds(r + 1e-9, eps, alpha)
    assert abs(lo2 - lo) < 1e-8 and abs(hi2 - hi) < 1e-8


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 5), st.floats(-5, 5), st.floats(0.05, 0.5), st.floats(0, 0.5))
def test_saturated_gradient_lower_bound(r, adv, eps, alpha):
    if abs(r - 1) <= eps + 1e-6:
        return
    h = 1e-7
    num = (leaky_surrogate(r + h, adv, eps, alpha)[0] - leaky_surrogate(r - h, adv, eps, alpha)[0]) / (2 * h)
    assert abs(num) >= alpha * abs(adv) - 1e-6
    assert abs(leaky_surrogate(r, adv, eps, alpha)[1]) >= alpha * abs(adv) - 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200))
def test_advantage_normalization(xs):
    a = np.asarray(xs)
    if a.std() < 1e-6:
        return
    z = normalize_advantages(a)
    assert abs(z.mean()) < 1e-9 and abs(z.var() - 1) < 1e-6


def make_batch(net, n=300, seed=0, adv=None, ratio_shift=0.0, logp_noise=0.0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(0, 1, (n, 8, 9)) * [1, 30, 5, 5, 2, 1, 1, 1, 30]
    mask = rng.random((n, 8)) < 0.5
    mask[:, 0] = True
    rows = np.where(mask[..., None], rows, 0.0)
    u, _, logp, value = sample_actions(net, rows, mask, rng, False)
    a = normalize_advantages(rng.normal(0, 1, n)) if adv is None else np.broadcast_to(adv, (n,)).astype(float)
    ret = value + rng.normal(0, 1, n)
    logp = logp + ratio_shift + rng.normal(0, logp_noise, n) * (logp_noise > 0)
    return RolloutBatch(rows, mask, u, logp, np.zeros(n), value, np.zeros(n, bool), a, ret)


def test_alpha_zero_matches_reference():
    net = init_network(LAYOUT, 0)
    # perturbed behaviour log-probs put many ratios outside the trust region
    batch = make_batch(net, logp_noise=0.3)
    ref = net.copy()
    s = PPOSettings(alpha=0.0)
    start = net.params.copy()
    stats = ppo_update(net, Adam(net.n_params, 2e-4), batch, s, np.random.default_rng(11))
    assert stats.fraction_saturated > 0.3
    ref_delta = reference_clipped_ppo(ref, batch, np.random.default_rng(11), lr=2e-4)
    assert np.max(np.abs((net.params - start) - ref_delta)) < 1e-9


def test_zero_advantage_only_entropy_moves_policy():
    net = init_network(LAYOUT, 1)
    batch = make_batch(net, adv=0.0)
    s = PPOSettings(value_coef=0.0)
    g, _ = policy_gradients(net, batch, np.arange(len(batch)), s)
    for layer in net.layers:
        sl = net.layer_slice(layer)
        if layer != "policy.out":
            assert not g[sl].any(), layer
    q = net._index["policy.log_std"]
    np.testing.assert_allclose(g[q.offset:q.offset + q.size], -s.entropy_coef)
    assert np.count_nonzero(g) == 2


def test_saturated_batch_has_gradient():
    net = init_network(LAYOUT, 2)
    batch = make_batch(net, adv=1.0, ratio_shift=-np.log(2.0))  # every ratio equals 2
    s = PPOSettings(alpha=0.01, entropy_coef=0.0, value_coef=0.0)
    g_leaky, st_ = policy_gradients(net, batch, np.arange(len(batch)), s)
    assert st_["sat"] == 1.0 and st_["ratio"] == pytest.approx(2.0)
    assert np.linalg.norm(g_leaky) > 0
    g0, _ = policy_gradients(net, batch, np.arange(len(batch)), PPOSettings(alpha=0.0, entropy_coef=0.0,
                                                                            value_coef=0.0))
    assert not g0.any()


def test_ppo_update_guards():
    net = init_network(LAYOUT, 3)
    batch = make_batch(net, n=1)
    with pytest.raises(ValueError):
        ppo_update(net, Adam(net.n_params, 1e-3), batch, PPOSettings(), np.random.default_rng(0))
    bad = make_batch(net, n=8)
    bad.returns[:] = np.inf
    with pytest.raises(TrainingError):
        ppo_update(net, Adam(net.n_params, 1e-3), bad, PPOSettings(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        PPOSettings(alpha=1.0)


def test_logp_includes_squash_correction():
    net = init_network(LAYOUT, 4)
    rng = np.random.default_rng(0)
    rows = np.zeros((1, 8, 9))
    mask = np.zeros((1, 8), bool)
    u, a, logp, _ = sample_actions(net, rows, mask, rng, False)
    out, _ = net.forward(scale_features(rows), mask, heads=("policy",))
    sd = np.exp(out["log_std"])
    gauss = np.sum(-0.5 * ((u - out["mean"]) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi))
    jac = np.sum(np.log(ACTION_BOUNDS * (1 - np.tanh(u) ** 2)))
    assert logp[0] == pytest.approx(gauss - jac, abs=1e-12)
    np.testing.assert_allclose(a, ACTION_BOUNDS * np.tanh(u))


def test_replay_fifo():
    buf = ReplayBuffer(5, 2, 3, 2)
    for k in range(7):
        buf.add(np.full((1, 2, 3), k), np.ones((1, 2), bool), np.full((1, 2), k))
    assert len(buf) == 5
    assert sorted(buf.actions[:, 0].tolist()) == [2, 3, 4, 5, 6]
    buf.add(np.zeros((9, 2, 3)), np.zeros((9, 2), bool), np.arange(18).reshape(9, 2))
    assert len(buf) == 5 and buf.inserted == 16
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(np.random.default_rng(0), 1)


def test_apply_resets_schedule():
    lay = Layout(embed_dim=8, hidden=(16, 16))
    net = init_network(lay, 0)
    opt = Adam(net.n_params, 1e-3)
    opt.m[:] = 1.0
    same, flag = apply_resets(net, opt, 999, 0)
    assert same is net and not flag and opt.m.all()
    assert apply_resets(net, opt, 0, 0)[1] is False
    new, flag = apply_resets(net, opt, 1000, 0)
    assert flag and new.seeds["resets"] == [1000]
    reset = set(net.last_layers(3))
    assert reset == {"policy.fc0", "policy.fc1", "policy.out", "value.fc0", "value.fc1", "value.out"}
    for layer in net.layers:
        sl = net.layer_slice(layer)
        assert (opt.m[sl] == 0).all() == (layer in reset)
