import json

import numpy as np
import pytest

from lcgen.gail import ExpertBuffer
from lcgen.nn import init_network, load_checkpoint
from lcgen.rewards import SVOConfig
from lcgen.sim import EnvConfig
from lcgen.trainer import (
    METRICS_COLUMNS, ConfigError, RolloutWorker, TrainerConfig, assemble_rewards, chunked_w_distance,
    load_config, load_trained, train,
)

TINY = TrainerConfig(batch_ppo=128, n_envs=16, batch_gail=128, minibatch=64, iterations=3, embed_dim=8,
                     hidden=(16, 16), disc_pretrain_steps=2, w_chunks=2, replay_capacity=1000)


def test_config_defaults_and_validation(tmp_path):
    c = TrainerConfig()
    assert (c.lr_ppo, c.batch_ppo, c.lr_gail, c.batch_gail, c.alpha, c.gamma) == (2e-4, 2048, 3e-4, 4096, 0.01, 0.99)
    assert (c.reset_interval, c.reset_layers, c.replay_capacity, c.theta_w) == (1000, 3, 100000, 0.9)
    assert TrainerConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError, match="'colour'"):
        TrainerConfig.from_dict({"colour": 1})
    for bad in ({"alpha": 1.0}, {"eps_clip": 0.0}, {"n_layers": 5}, {"batch_ppo": 100}, {"svo_mode": "x"}):
        with pytest.raises(ConfigError):
            TrainerConfig().replace(**bad)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"iterations": 7, "hidden": [8]}))
    assert load_config(p).iterations == 7 and load_config(p).hidden == (8,)
    p.write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_empty_catalog_fails_before_training(tmp_path):
    with pytest.raises(ValueError):
        train(TINY, [], out_dir=tmp_path / "run")
    assert not (tmp_path / "run").exists()


def test_rollout_shapes_and_phi_reset(pursuit):
    cfg = TINY
    w = RolloutWorker(pursuit, 4, EnvConfig(), SVOConfig(), [0, 1, 0])
    net = init_network(cfg.layout(), 0)
    roll = w.collect(net, 60)
    assert roll["rows"].shape == (60, 4, 8, 9) and roll["done"].shape == (60, 4)
    assert roll["done"].any()
    t, e = np.argwhere(roll["done"])[0]
    if t + 1 < 60:
        assert roll["phi"][t + 1, e] == 0.0  # fresh episode starts from a zero angle
    assert np.all(np.abs(roll["a"]) <= [5.0, np.pi / 4])


def test_assemble_rewards_composition(pursuit):
    cfg = TINY
    net = init_network(cfg.layout(), 1)
    disc = init_network(cfg.layout(("disc",)), 2)
    roll = RolloutWorker(pursuit, 4, EnvConfig(), cfg.svo(), [0, 1, 0]).collect(net, 20)
    expert = ExpertBuffer.from_catalog(pursuit)
    rew = assemble_rewards(roll, cfg, disc, expert, np.random.default_rng(0))
    np.testing.assert_allclose(rew["r_adv"], rew["r_svo"] + rew["r_dist"] + rew["r_coll"])
    channel = 0.5 * rew["r_natural"] + 0.5 * rew["r_imitation"]
    np.testing.assert_allclose(rew["total"], 0.6 * channel + 0.4 * rew["r_adv"])
    np.testing.assert_allclose(rew["adv_score"], rew["r_svo"] + cfg.beta * rew["r_adv"])
    assert np.all((rew["r_natural"] >= 0) & (rew["r_natural"] <= 1))
    assert np.all((rew["r_imitation"] >= 0) & (rew["r_imitation"] <= 10))


def test_chunked_w_distance_zero_on_identical():
    a = np.random.default_rng(0).uniform(-1, 1, (64, 2))
    assert not chunked_w_distance(a, a, 4).any()


def test_train_is_deterministic(tmp_path, pursuit):
    a = train(TINY, pursuit, out_dir=tmp_path / "a")
    b = train(TINY, pursuit, out_dir=tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    header, *rows = a.metrics_path.read_text().splitlines()
    assert header.split(",") == list(METRICS_COLUMNS) and len(rows) == 3
    man = json.loads(a.manifest_path.read_text())
    assert man["status"] == "ok" and man["config_hash"] == TINY.digest()
    policy, disc, cfg = load_trained(a.checkpoint_path)
    assert cfg == TINY and np.array_equal(policy.params, a.policy.params)
    nets, _ = load_checkpoint(a.checkpoint_path)
    assert set(nets) == {"policy", "disc"}


def test_train_with_workers(pursuit):
    cfg = TINY.replace(workers=2, iterations=2)
    a = train(cfg, pursuit)
    b = train(cfg, pursuit)
    assert a.metrics == b.metrics and len(a.metrics) == 2


def test_resets_inside_training(pursuit):
    cfg = TINY.replace(reset_interval=2, iterations=4)
    arts = train(cfg, pursuit)
    assert [r["reset_flag"] for r in arts.metrics] == [0, 1, 0, 1]
    assert arts.policy.seeds["resets"] == [cfg.seed + 2, cfg.seed + 4]


def test_failure_manifest(tmp_path, pursuit, monkeypatch):
    import lcgen.trainer as tr

    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(tr, "ppo_update", boom)
    with pytest.raises(FloatingPointError):
        train(TINY, pursuit, out_dir=tmp_path / "f")
    man = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_iteration"] == 1 and "synthetic" in man["error"]
