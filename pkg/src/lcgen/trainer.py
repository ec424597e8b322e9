"""Two-stage adversary training: discriminator warm-up, then leaky PPO iterations.

Each iteration collects ``batch_ppo`` transitions from lockstep scenario
replays, assembles rewards (naturalness, imitation, SVO, proximity and
collision terms), runs the PPO update, refreshes the discriminator from the
replay buffer and applies the periodic last-layer reset.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import multiprocessing as mp
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .gail import DiscBatch, ExpertBuffer, disc_probability, disc_update, imitation_reward
from .mining import Scenario
from .nn import (Adam, Layout, Network, gaussian_log_prob, init_network, load_checkpoint, save_checkpoint, squash,
                 squash_log_det)
from .ppo import PPOSettings, ReplayBuffer, RolloutBatch, apply_resets, compute_gae, normalize_advantages, ppo_update
from .rewards import (BatchStats, SVOConfig, collision_reward, distance_reward, natural_reward,
                      social_utility, svo_reward, total_reward, u_ego, w_distance)
from .sim import ACTION_BOUNDS, BatchEnv, EnvConfig, scale_features

METRICS_COLUMNS = ("iteration", "mean_reward", "mean_adv_reward", "w_distance", "collision_rate",
                   "fraction_saturated", "reset_flag")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    # optimisation
    lr_ppo: float = 2e-4
    batch_ppo: int = 2048
    threads_ppo: int = 2
    lr_gail: float = 3e-4
    batch_gail: int = 4096
    threads_gail: int = 24
    alpha: float = 0.01
    gamma: float = 0.99
    eps_clip: float = 0.2
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    # resets and replay
    reset_interval: int = 1000
    reset_layers: int = 3
    replay_capacity: int = 100000
    # reward composition
    w1: float = 6.0
    w2: float = 4.0
    theta_w: float = 0.9
    beta: float = 1.0
    imitation_weight: float = 0.5
    w_chunks: int = 8
    svo_mode: str = "adaptive"
    svo_angle_deg: float = 0.0
    svo_beta0: float = 1.0
    svo_beta1: float = 1.0
    svo_smoothing: float = 0.9
    # schedule
    iterations: int = 200
    seed: int = 0
    n_envs: int = 64
    workers: int = 1
    disc_pretrain_steps: int = 20
    disc_steps: int = 1
    # network layout
    n_vehicles: int = 8
    embed_dim: int = 32
    n_heads: int = 2
    n_layers: int = 2
    hidden: Tuple[int, ...] = (64, 64)
    log_std_init: float = -0.5
    adversary_role: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        positive = ("lr_ppo", "batch_ppo", "threads_ppo", "lr_gail", "batch_gail", "threads_gail", "gamma",
                    "epochs", "minibatch", "reset_interval", "replay_capacity", "theta_w", "n_envs", "workers",
                    "w_chunks")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")
        if not 0 < self.eps_clip < 1:
            raise ConfigError("eps_clip must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1 or not 0 <= self.imitation_weight <= 1:
            raise ConfigError("gae_lambda and imitation_weight must lie in [0, 1]")
        if self.iterations < 0 or self.reset_layers < 0 or self.disc_pretrain_steps < 0 or self.disc_steps < 0:
            raise ConfigError("iteration and step counts must be non-negative")
        if self.batch_ppo % self.n_envs:
            raise ConfigError("batch_ppo must be a multiple of n_envs")
        if self.n_envs % self.workers:
            raise ConfigError("n_envs must be a multiple of workers")
        if self.batch_gail % 2:
            raise ConfigError("batch_gail must be even (balanced halves)")
        try:
            self.svo()
            self.layout()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def svo(self) -> SVOConfig:
        return SVOConfig(mode=self.svo_mode, phi=math.radians(self.svo_angle_deg), beta0=self.svo_beta0,
                         beta1=self.svo_beta1, smoothing=self.svo_smoothing)

    def layout(self, heads=("policy", "value")) -> Layout:
        lay = Layout(n_vehicles=self.n_vehicles, embed_dim=self.embed_dim, n_heads=self.n_heads,
                     n_layers=self.n_layers, hidden=self.hidden, heads=heads, log_std_init=self.log_std_init)
        lay.validate()
        return lay

    def ppo(self) -> PPOSettings:
        return PPOSettings(self.eps_clip, self.alpha, self.epochs, self.minibatch, self.value_coef,
                           self.entropy_coef, self.max_grad_norm)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **kw) -> "TrainerConfig":
        return self.from_dict({**self.to_dict(), **kw})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> TrainerConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return TrainerConfig.from_dict(data)


# -- rollout collection -------------------------------------------------------

def sample_actions(net: Network, rows, mask, rng: np.random.Generator, greedy: bool = False):
    out, _ = net.forward(scale_features(rows), mask, heads=("policy", "value"))
    mean, log_std = out["mean"], out["log_std"]
    u = mean if greedy else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = gaussian_log_prob(u, mean, log_std) - squash_log_det(u, ACTION_BOUNDS)
    return u, squash(u, ACTION_BOUNDS), logp, out["value"]


class RolloutWorker:
    """Owns a slice of lockstep environments and carries their SVO angle state."""

    def __init__(self, catalog: Sequence[Scenario], n_envs: int, env_cfg: EnvConfig, svo: SVOConfig, seed):
        self.rng = np.random.default_rng(seed)
        self.env = BatchEnv(catalog, n_envs, env_cfg, self.rng)
        self.svo = svo
        self.phi = np.zeros(n_envs)

    def collect(self, net: Network, steps: int) -> Dict[str, np.ndarray]:
        env = self.env
        keys = ("rows", "mask", "u", "a", "logp", "value", "done", "hit_ego", "hit_bg", "speed", "distance",
                "d0", "u_sv", "phi")
        buf: Dict[str, list] = {k: [] for k in keys}
        rows, mask = env.observe()
        for _ in range(steps):
            u, a, logp, value = sample_actions(net, rows, mask, self.rng)
            info = env.step(a[:, 0], a[:, 1])
            prow, pmask = env.observe()
            usv, _ = social_utility(prow, pmask, self.svo)
            _, phi = svo_reward(u_ego(info["adversary_speed"]), usv, self.svo, self.phi)
            step_vals = (rows, mask, u, a, logp, value, info["done"], info["adv_hit_ego"],
                         info["adv_hit_background"], info["adversary_speed"], info["distance"],
                         info["initial_distance"], usv, self.phi.copy())
            for k, v in zip(keys, step_vals):
                buf[k].append(v)
            self.phi = np.where(info["done"], 0.0, phi)
            if info["done"].any():
                env.reset_done()
                rows, mask = env.observe()
            else:
                rows, mask = prow, pmask
        _, _, _, last_value = sample_actions(net, rows, mask, self.rng, greedy=True)
        out = {k: np.stack(v) for k, v in buf.items()}
        out["last_value"] = last_value
        return out


def _worker_main(conn, catalog, n_envs, env_cfg, svo, seed):
    import os as _os
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(var, "1")
    worker = RolloutWorker(catalog, n_envs, env_cfg, svo, seed)
    while True:
        msg = conn.recv()
        if msg is None:
            break
        net, steps = msg
        try:
            conn.send(("ok", worker.collect(net, steps)))
        except Exception as exc:  # reported to the parent, which raises
            conn.send(("error", repr(exc)))


class RolloutPool:
    """Fixed-order fan-out over workers; a single worker runs in-process."""

    def __init__(self, catalog, cfg: TrainerConfig, env_cfg: EnvConfig, svo: SVOConfig, seed: int):
        per = cfg.n_envs // cfg.workers
        seeds = [[seed, 1, w] for w in range(cfg.workers)]
        self.local = None
        self.procs = []
        if cfg.workers == 1:
            self.local = RolloutWorker(catalog, per, env_cfg, svo, seeds[0])
            return
        ctx = mp.get_context("fork")
        for w in range(cfg.workers):
            parent, child = ctx.Pipe()
            p = ctx.Process(target=_worker_main, args=(child, catalog, per, env_cfg, svo, seeds[w]), daemon=True)
            p.start()
            self.procs.append((p, parent))

    def collect(self, net: Network, steps: int) -> Dict[str, np.ndarray]:
        if self.local is not None:
            return self.local.collect(net, steps)
        for _, conn in self.procs:
            conn.send((net, steps))
        parts = []
        for _, conn in self.procs:
            status, payload = conn.recv()
            if status != "ok":
                raise RuntimeError(f"rollout worker failed: {payload}")
            parts.append(payload)
        return {k: np.concatenate([p[k] for p in parts], axis=-1 if k == "last_value" else 1) for k in parts[0]}

    def close(self):
        for p, conn in self.procs:
            conn.send(None)
            p.join(timeout=5)
        self.procs = []


# -- reward assembly ----------------------------------------------------------

def chunked_w_distance(gen_actions: np.ndarray, exp_actions: np.ndarray, n_chunks: int) -> np.ndarray:
    """Per-chunk W-distance between normalized generated and expert action batches."""
    g = np.array_split(gen_actions / ACTION_BOUNDS, n_chunks)
    e = np.array_split(exp_actions / ACTION_BOUNDS, n_chunks)
    return np.array([w_distance(BatchStats.from_samples(a), BatchStats.from_samples(b)) for a, b in zip(g, e)])


def assemble_rewards(roll: Dict[str, np.ndarray], cfg: TrainerConfig, disc: Optional[Network],
                     expert: ExpertBuffer, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Per-step reward arrays of shape ``(T, n_envs)``."""
    shape = roll["done"].shape
    svo = cfg.svo()
    ue = u_ego(roll["speed"])
    r_svo, _ = svo_reward(ue, roll["u_sv"], svo, roll["phi"])
    r_dist = distance_reward(roll["distance"], roll["d0"])
    r_coll = collision_reward(roll["hit_ego"], roll["hit_bg"])
    flat_a = roll["a"].reshape(-1, 2)
    exp_a = expert.sample(rng, len(flat_a))[2]
    w_chunks = chunked_w_distance(flat_a, exp_a, cfg.w_chunks)
    r_nat = np.concatenate([np.full(len(c), natural_reward(w, cfg.theta_w))
                            for c, w in zip(np.array_split(np.arange(len(flat_a)), cfg.w_chunks), w_chunks)])
    r_nat = r_nat.reshape(shape)
    if disc is not None and cfg.imitation_weight > 0:
        d = disc_probability(disc, roll["rows"].reshape(-1, *roll["rows"].shape[2:]),
                             roll["mask"].reshape(-1, roll["mask"].shape[-1]), flat_a)
        r_imit = imitation_reward(d).reshape(shape)
    else:
        r_imit = np.zeros(shape)
    channel = (1 - cfg.imitation_weight) * r_nat + cfg.imitation_weight * r_imit
    r_adv, total, score = total_reward(channel, r_svo, r_dist, r_coll, cfg.beta, cfg.w1, cfg.w2)
    return {"r_natural": r_nat, "r_imitation": r_imit, "r_svo": r_svo, "r_dist": r_dist, "r_coll": r_coll,
            "r_adv": r_adv, "total": total, "adv_score": score, "w": float(np.mean(w_chunks))}


# -- training loop --------------------------------------------------------------

@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    manifest_path: Path
    metrics: List[dict] = field(default_factory=list)
    policy: Optional[Network] = None
    disc: Optional[Network] = None


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_json_atomic(path, data) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def train(cfg: TrainerConfig, catalog: Sequence[Scenario], expert: Optional[ExpertBuffer] = None,
          out_dir=None, init: Optional[Dict[str, Network]] = None, log=None,
          manifest_extra: Optional[dict] = None) -> RunArtifacts:
    """Run both training stages; writes metrics, checkpoint and manifest when ``out_dir`` is given."""
    if not catalog:
        raise ValueError("training needs a nonempty scenario catalog")
    expert = expert if expert is not None else ExpertBuffer.from_catalog(catalog, cfg.adversary_role, cfg.n_vehicles)
    if not len(expert):
        raise ValueError("training needs a nonempty expert buffer")
    started = time.time()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    arts = RunArtifacts(out, out / "metrics.csv" if out else None, out / "checkpoint.lcgen" if out else None,
                        out / "manifest.json" if out else None)

    env_cfg = EnvConfig(n_vehicles=cfg.n_vehicles, adversary_role=cfg.adversary_role)
    rng = np.random.default_rng([cfg.seed, 0])
    if init is not None:
        policy, disc = init["policy"].copy(), init["disc"].copy()
        if policy.layout != cfg.layout() or disc.layout != cfg.layout(("disc",)):
            raise ValueError("initial networks do not match the configured layout")
    else:
        policy = init_network(cfg.layout(), cfg.seed)
        disc = init_network(cfg.layout(("disc",)), cfg.seed + 7919)
    opt = Adam(policy.n_params, cfg.lr_ppo)
    dopt = Adam(disc.n_params, cfg.lr_gail)
    replay = ReplayBuffer(cfg.replay_capacity, cfg.n_vehicles)
    pool = RolloutPool(catalog, cfg, env_cfg, cfg.svo(), cfg.seed)
    steps = cfg.batch_ppo // cfg.n_envs
    half = cfg.batch_gail // 2
    settings = cfg.ppo()
    fh = arts.metrics_path.open("w") if out else None
    iteration = 0
    try:
        if fh:
            fh.write(",".join(METRICS_COLUMNS) + "\n")
        # stage 1: discriminator against the untrained (near-random) policy
        if cfg.disc_pretrain_steps:
            roll = pool.collect(policy, steps)
            replay.add(roll["rows"].reshape(-1, *roll["rows"].shape[2:]),
                       roll["mask"].reshape(-1, cfg.n_vehicles), roll["a"].reshape(-1, 2))
            for _ in range(cfg.disc_pretrain_steps):
                disc_update(disc, DiscBatch.balanced(expert.sample(rng, half), replay.sample(rng, half)),
                            opt=dopt)
        # stage 2
        for iteration in range(1, cfg.iterations + 1):
            roll = pool.collect(policy, steps)
            rew = assemble_rewards(roll, cfg, disc, expert, rng)
            adv, ret = compute_gae(rew["total"], roll["value"], roll["done"], roll["last_value"],
                                   cfg.gamma, cfg.gae_lambda)
            flat = lambda a: a.reshape(-1, *a.shape[2:])
            batch = RolloutBatch(flat(roll["rows"]), flat(roll["mask"]), flat(roll["u"]), flat(roll["logp"]),
                                 flat(rew["total"]), flat(roll["value"]), flat(roll["done"]),
                                 normalize_advantages(flat(adv)), flat(ret))
            stats = ppo_update(policy, opt, batch, settings, rng)
            replay.add(batch.rows, batch.mask, flat(roll["a"]))
            for _ in range(cfg.disc_steps):
                disc_update(disc, DiscBatch.balanced(expert.sample(rng, half), replay.sample(rng, half)),
                            opt=dopt)
            policy, did_reset = apply_resets(policy, opt, iteration, cfg.seed, cfg.reset_interval,
                                             cfg.reset_layers)
            n_done = int(roll["done"].sum())
            row = {
                "iteration": iteration,
                "mean_reward": float(rew["total"].mean()),
                "mean_adv_reward": float(rew["adv_score"].mean()),
                "w_distance": rew["w"],
                "collision_rate": float(roll["hit_ego"].sum()) / max(n_done, 1),
                "fraction_saturated": stats.fraction_saturated,
                "reset_flag": int(did_reset),
            }
            arts.metrics.append(row)
            if fh:
                fh.write(",".join(_fmt(row[c]) for c in METRICS_COLUMNS) + "\n")
            if log:
                log(row)
    except Exception as exc:
        if out:
            write_json_atomic(arts.manifest_path, _manifest(cfg, arts, started, "failed", error=repr(exc),
                                                            failed_iteration=iteration, **(manifest_extra or {})))
        raise
    finally:
        pool.close()
        if fh:
            fh.close()
    arts.policy, arts.disc = policy, disc
    if out:
        save_checkpoint(arts.checkpoint_path, {"policy": policy, "disc": disc}, {"config": cfg.to_dict()})
        write_json_atomic(arts.manifest_path, _manifest(cfg, arts, started, "ok", **(manifest_extra or {})))
    return arts


def _manifest(cfg: TrainerConfig, arts: RunArtifacts, started: float, status: str, **extra) -> dict:
    m = arts.metrics
    tail = m[-50:]
    return {
        "command": "train",
        "status": status,
        "tool_version": __version__,
        "git_describe": git_describe(),
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": {"base": cfg.seed, "resets": [cfg.seed + i["iteration"] for i in m if i["reset_flag"]]},
        "started": started,
        "wall_clock_s": time.time() - started,
        "artifacts": {k: str(v) for k, v in (("metrics", arts.metrics_path), ("checkpoint", arts.checkpoint_path))},
        "summary": {
            "iterations": len(m),
            "final_mean_adv_reward": float(np.mean([r["mean_adv_reward"] for r in tail])) if tail else None,
        },
        **extra,
    }


def load_trained(path) -> Tuple[Network, Network, TrainerConfig]:
    nets, extra = load_checkpoint(path)
    if "policy" not in nets or "disc" not in nets:
        from .nn import CheckpointError
        raise CheckpointError(f"{path}: checkpoint lacks policy or discriminator networks")
    return nets["policy"], nets["disc"], TrainerConfig.from_dict(extra.get("config", {}))
