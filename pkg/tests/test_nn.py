import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcgen.nn import (
    Adam, CheckpointError, Layout, LayoutError, Network, clip_grad_norm, forward_disc, forward_policy,
    forward_value, gaussian_log_prob, init_network, load_checkpoint, reset_last_layers, save_checkpoint,
    set_encode, squash, squash_log_det, unsquash,
)
from lcgen.sim import FeatureMatrix
from gradcheck import fd_relative_error, random_instance

SMALL = Layout(embed_dim=8, hidden=(8,), heads=("policy", "value", "disc"))


def fm_from(rng, n_present, v=8):
    rows = np.zeros((v, 9))
    mask = np.zeros(v, bool)
    rows[:n_present] = rng.normal(0, 1, (n_present, 9))
    mask[:n_present] = True
    return FeatureMatrix(rows, mask)


def test_init_determinism_and_seeds():
    a = init_network(SMALL, 3)
    b = init_network(SMALL, 3)
    c = init_network(SMALL, 4)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


@pytest.mark.parametrize("kw", [{"n_layers": 5}, {"n_layers": 1}, {"n_heads": 5}, {"n_heads": 3},
                                {"hidden": ()}, {"heads": ("policy", "critic")}])
def test_invalid_layouts(kw):
    with pytest.raises(LayoutError):
        init_network(Layout(**kw))


def test_wrong_param_count():
    with pytest.raises(LayoutError):
        Network(SMALL, np.zeros(3))


def test_permutation_and_all_masked():
    rng = np.random.default_rng(0)
    net = init_network(SMALL, 1)
    fm = fm_from(rng, 5)
    base = set_encode(net, fm)
    for _ in range(5):
        perm = rng.permutation(8)
        assert np.array_equal(set_encode(net, FeatureMatrix(fm.rows[perm], fm.mask[perm])), base)
    assert np.array_equal(set_encode(net, FeatureMatrix.empty()), np.zeros(8))


def test_single_row_gets_full_attention():
    rng = np.random.default_rng(2)
    net = init_network(SMALL, 1)
    fm = fm_from(rng, 1)
    x = fm.rows[0]
    h = np.tanh(x @ net.p("proj.W") + net.p("proj.b"))
    for l in range(SMALL.n_layers):
        d = SMALL.embed_dim
        vv = h @ net.p(f"attn{l}.Wqkv")[:, 2 * d:]  # softmax over one key is exactly 1
        h = h + np.tanh(vv @ net.p(f"attn{l}.Wo") + net.p(f"attn{l}.bo"))
    np.testing.assert_allclose(set_encode(net, fm), h, atol=1e-12)


def test_tiny_net_hand_evaluation():
    lay = Layout(n_features=1, n_vehicles=1, embed_dim=1, n_heads=1, n_layers=2, hidden=(1,), heads=("value",))
    net = init_network(lay, 0)
    vals = {"proj.W": 0.5, "proj.b": 0.1, "attn0.Wqkv": [0.3, -0.2, 0.7], "attn0.Wo": 1.1, "attn0.bo": -0.05,
            "attn1.Wqkv": [0.4, 0.6, -0.9], "attn1.Wo": 0.8, "attn1.bo": 0.2,
            "value.fc0.W": 1.5, "value.fc0.b": -0.3, "value.out.W": 2.0, "value.out.b": 0.25}
    for k, v in vals.items():
        net.p(k)[...] = np.reshape(v, net.p(k).shape)
    xin = 2.0
    h = math.tanh(0.5 * xin + 0.1)
    h = h + math.tanh(0.7 * h * 1.1 - 0.05)
    h = h + math.tanh(-0.9 * h * 0.8 + 0.2)
    want = 2.0 * math.tanh(1.5 * h - 0.3) + 0.25
    got = forward_value(net, FeatureMatrix(np.array([[xin]]), np.array([True])))
    assert got == pytest.approx(want, abs=1e-14)


def test_heads_deterministic_and_disc_range():
    rng = np.random.default_rng(5)
    net = init_network(SMALL, 7)
    fm = fm_from(rng, 4)
    d1, d2 = forward_policy(net, fm), forward_policy(net, fm)
    assert np.array_equal(d1.mean, d2.mean) and np.array_equal(d1.log_std, d2.log_std)
    assert forward_value(net, fm) == forward_value(net, fm)
    for a in rng.uniform(-50, 50, (20, 2)):
        p = forward_disc(net, fm, a)
        assert 0.0 < p < 1.0
    net.params[0] = np.nan
    with pytest.raises(FloatingPointError):
        forward_value(net, fm)


def test_log_std_clamped():
    net = init_network(SMALL, 0)
    net.p("policy.log_std")[...] = [9.0, -9.0]
    d = forward_policy(net, FeatureMatrix.empty())
    assert d.log_std.tolist() == [2.0, -5.0]


@pytest.mark.parametrize("key", ["mean", "log_std", "value", "disc_logit"])
def test_finite_difference_heads(key):
    for seed in range(3):
        net, X, M, acts, rng = random_instance(seed)
        err, _, _ = fd_relative_error(net, X, M, acts, key, rng)
        assert err < 1e-4


def test_missing_cache_and_zero_upstream():
    net, X, M, acts, rng = random_instance(0)
    with pytest.raises(ValueError):
        net.backward(None, {"value": np.ones(3)})
    _, cache = net.forward(X, M, actions=acts)
    g = net.backward(cache, {"mean": np.zeros((3, 2)), "value": np.zeros(3), "disc_logit": np.zeros(3)})
    assert not g.any()


def test_value_gradient_sparsity():
    net, X, M, acts, rng = random_instance(1)
    _, cache = net.forward(X, M, heads=("value",))
    g = net.backward(cache, {"value": rng.normal(0, 1, 3)})
    for layer in net.layers:
        if layer.startswith(("policy", "disc")):
            assert not g[net.layer_slice(layer)].any()


def test_masked_rows_do_not_change_outputs():
    rng = np.random.default_rng(9)
    net = init_network(SMALL, 2)
    fm = fm_from(rng, 3)
    a = np.array([0.3, -0.1])
    ref = (set_encode(net, fm), forward_value(net, fm), forward_disc(net, fm, a))
    rows = fm.rows.copy()
    rows[5] = rng.normal(0, 5, 9)  # garbage in a masked slot
    fm2 = FeatureMatrix(rows, fm.mask)
    assert np.array_equal(set_encode(net, fm2), ref[0])
    assert forward_value(net, fm2) == ref[1] and forward_disc(net, fm2, a) == ref[2]


def test_reset_last_layers():
    net = init_network(SMALL, 0)
    net.params[:] += 0.01  # make every layer differ from any fresh draw
    same = reset_last_layers(net, 0, 99)
    assert np.array_equal(same.params, net.params)
    out = reset_last_layers(net, 3, 99)
    chosen = set(net.last_layers(3))
    assert chosen == {"attn1", "policy.fc0", "policy.out", "value.fc0", "value.out", "disc.fc0", "disc.out"}
    for layer in net.layers:
        sl = net.layer_slice(layer)
        if layer in chosen:
            assert not np.array_equal(out.params[sl], net.params[sl])
        else:
            assert out.params[sl].tobytes() == net.params[sl].tobytes()
    with pytest.raises(LayoutError):
        reset_last_layers(net, 6, 1)


def test_squash_roundtrip_and_log_det():
    bounds = np.array([5.0, math.pi / 4])
    u = np.array([[0.3, -1.2], [4.0, 0.0]])
    np.testing.assert_allclose(unsquash(squash(u, bounds), bounds), u, atol=1e-7)
    h = 1e-6
    for row in u:
        jac = [(squash(row + h * e, bounds) - squash(row - h * e, bounds))[i] / (2 * h)
               for i, e in enumerate(np.eye(2))]
        assert squash_log_det(row, bounds) == pytest.approx(np.log(np.abs(jac)).sum(), abs=1e-6)
    assert gaussian_log_prob(np.zeros(1), np.zeros(1), np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_adam_and_clip():
    opt = Adam(2, 0.1)
    p = np.zeros(2)
    d = opt.step(p, np.array([1.0, -2.0]))
    np.testing.assert_allclose(d, [-0.1, 0.1], atol=1e-6)
    g, n = clip_grad_norm(np.array([3.0, 4.0]), 0.5)
    assert n == 5.0 and np.linalg.norm(g) == pytest.approx(0.5)


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    a = init_network(SMALL, 1)
    b = reset_last_layers(init_network(Layout(), 2), 3, 1002)
    p = tmp_path / "ck.lcgen"
    save_checkpoint(p, {"policy": a, "disc": b}, {"note": 1})
    p2 = tmp_path / "ck2.lcgen"
    save_checkpoint(p2, {"disc": b, "policy": a}, {"note": 1})
    assert p.read_bytes() == p2.read_bytes()
    nets, extra = load_checkpoint(p)
    assert extra == {"note": 1}
    assert np.array_equal(nets["policy"].params, a.params) and nets["disc"].seeds == b.seeds
    data = bytearray(p.read_bytes())
    data[-5] ^= 0xFF
    bad = tmp_path / "bad.lcgen"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_embedding_permutation_property(n_present, seed):
    rng = np.random.default_rng(seed)
    net = init_network(SMALL, seed % 7)
    fm = fm_from(rng, n_present)
    perm = rng.permutation(8)
    assert np.array_equal(set_encode(net, fm), set_encode(net, FeatureMatrix(fm.rows[perm], fm.mask[perm])))
