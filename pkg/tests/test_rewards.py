import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from lcgen.rewards import (
    BatchStats, SVOConfig, collision_reward, compose, distance_reward, natural_reward, social_utility,
    svo_reward, total_reward, u_ego, w_distance,
)
from lcgen.sim import CollisionReport


def stats(mean, sd, count=10):
    return BatchStats(np.atleast_1d(mean), np.atleast_1d(sd) ** 2, count)


def test_w_distance_examples():
    p = stats([0.3, -1.0], [0.5, 2.0])
    assert w_distance(p, p) == 0.0
    assert w_distance(stats(0.0, 1.0), stats(1.0, 1.0)) == pytest.approx(1.0, abs=1e-12)
    assert w_distance(stats(0.0, 2.0), stats(0.0, 1.0)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        w_distance(stats([0, 0], [1, 1]), stats(0, 1))


def test_w_distance_batches_average():
    a = [stats(0.0, 1.0), stats(0.0, 1.0)]
    b = [stats(1.0, 1.0), stats(0.0, 3.0)]
    assert w_distance(a, b) == pytest.approx((1.0 + 4.0) / 2)
    with pytest.raises(ValueError):
        w_distance(a, b[:1])


def test_batch_stats_from_samples():
    s = BatchStats.from_samples([[1.0, 2.0], [3.0, 2.0]])
    np.testing.assert_allclose(s.mean, [2.0, 2.0])
    np.testing.assert_allclose(s.var, [2.0, 0.0])  # unbiased
    with pytest.raises(ValueError):
        BatchStats.from_samples([[1.0, 2.0]])
    with pytest.raises(ValueError):
        BatchStats([0.0], [-1.0], 3)


# rounded so squared differences cannot underflow to zero
_r = lambda lo, hi: st.floats(lo, hi).map(lambda v: round(v, 6))
diag = st.lists(st.tuples(_r(-5, 5), _r(0, 4)), min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(diag, diag)
def test_w_distance_symmetry_nonneg(a, b):
    assume(len(a) == len(b))
    pa = stats([m for m, _ in a], [s for _, s in a])
    pb = stats([m for m, _ in b], [s for _, s in b])
    w = w_distance(pa, pb)
    assert w == w_distance(pb, pa) and w >= 0
    if w == 0:
        np.testing.assert_array_equal(pa.mean, pb.mean)
        np.testing.assert_array_equal(np.sqrt(pa.var), np.sqrt(pb.var))


def test_natural_reward_examples():
    assert natural_reward(0.0, 0.9) == 1.0
    assert natural_reward(0.9, 0.9) == 0.0
    assert natural_reward(0.45, 0.9) == pytest.approx(0.5)
    assert natural_reward(5.0, 0.9) == 0.0
    with pytest.raises(ValueError):
        natural_reward(0.1, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 5))
def test_natural_reward_monotone(w1, w2, theta):
    lo, hi = sorted((w1, w2))
    assert natural_reward(lo, theta) >= natural_reward(hi, theta)
    assert 0 <= natural_reward(lo, theta) <= 1


def rows_for(vehicles):
    rows = np.zeros((8, 9))
    mask = np.zeros(8, bool)
    for i, (x, y, vx, vy, p) in enumerate(vehicles):
        rows[i, :5] = [1, x, y, vx, vy]
        rows[i, 7] = p
        rows[i, 8] = math.hypot(x, y)
        mask[i] = True
    return rows, mask


def test_social_utility_examples():
    cfg = SVOConfig()
    u, s = social_utility(*rows_for([(10, 0, -5, 0, 0)]), cfg)
    assert s[0] == pytest.approx(50 / (10 + 1e-6), abs=1e-12) and u == pytest.approx(s[0])
    u, s = social_utility(*rows_for([(10, 0, 5, 0, 0)]), cfg)
    assert s[0] == 0.0 and u == 0.0
    u, s = social_utility(*rows_for([(10, 0, -5, 0, 1), (0, -10, 0, 5, 0)]), cfg)
    assert s[0] == pytest.approx(s[1])
    assert u == pytest.approx(2 * s[0] + s[1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-30, 30), st.floats(-30, 30),
                          st.integers(0, 1)), max_size=8))
def test_closing_speed_nonneg(vehicles):
    u, s = social_utility(*rows_for(vehicles))
    assert np.all(s >= 0) and u >= 0
    receding = [(x, y, x, y, p) for x, y, _, _, p in vehicles]  # velocity along the offset
    u2, _ = social_utility(*rows_for(receding))
    assert u2 == 0.0


def test_svo_examples():
    r, phi = svo_reward(0.7, 0.4, SVOConfig(mode="fixed", phi=0.0))
    assert r == pytest.approx(0.7) and phi == 0.0
    r, _ = svo_reward(3.0, 4.0, SVOConfig(smoothing=0.0))
    assert r == pytest.approx(5.0, abs=1e-12)
    r, _ = svo_reward(1.0, 1.0, SVOConfig.fixed_degrees(-45))
    assert r == pytest.approx(0.0, abs=1e-12)
    r, phi = svo_reward(1.0, 1.0, SVOConfig(mode="none"), 0.3)
    assert r == 0.0 and phi == 0.3
    # adaptive smoothing carries the previous angle
    r, phi = svo_reward(1.0, 0.0, SVOConfig(smoothing=0.9), 0.5)
    assert phi == pytest.approx(0.45) and r == pytest.approx(math.cos(0.45))
    with pytest.raises(ValueError):
        SVOConfig(mode="fixed", phi=2.0)
    with pytest.raises(ValueError):
        SVOConfig(mode="greedy")


def test_u_ego_distance_collision():
    assert u_ego(30.0) == 1.0 and u_ego(0.0) == 0.0 and u_ego(90.0) == 2.0
    assert distance_reward(10.0, 10.0) == 0.0
    assert distance_reward(5.0, 10.0) == 0.5
    assert distance_reward(30.0, 10.0) == -1.0
    with pytest.raises(ValueError):
        distance_reward(1.0, 0.0)
    assert collision_reward(True, True) == 1.0
    assert collision_reward(False, False) == 0.0
    assert collision_reward(False, True) == -1.0
    assert collision_reward(CollisionReport(adv_hit_ego=True)) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6), st.booleans(), st.booleans())
def test_term_ranges(d, d0, e, b):
    assert -1.0 <= distance_reward(d, d0) <= 1.0
    assert collision_reward(e, b) in (-1.0, 0.0, 1.0)


def test_total_reward_examples():
    br = compose(1.0, 0.0, 0.0, 0.0)
    assert br.total == pytest.approx(0.6) and br.r_adv == 0.0
    assert compose(0, 0, 0, 0).total == 0.0
    br = compose(0.0, 0.5, 0.2, 1.0)
    assert br.r_adv == pytest.approx(1.7)
    assert br.total == pytest.approx(0.4 * 1.7)
    assert br.adv_score == pytest.approx(0.5 + 1.7)
    r_adv, total, score = total_reward(np.array([1.0, 0.0]), 0.5, 0.2, 1.0, beta=2.0)
    np.testing.assert_allclose(total, [0.6 + 0.68, 0.68])
    np.testing.assert_allclose(score, 0.5 + 2 * 1.7)
    with pytest.raises(ValueError):
        compose(0, 0, 0, 0, w1=0, w2=0)
