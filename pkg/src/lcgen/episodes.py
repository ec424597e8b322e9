"""Roll out a trained adversary on catalog scenarios and score the resulting traces."""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .mining import Scenario
from .nn import Network
from .rewards import (BatchStats, SVOConfig, collision_reward, compose, distance_reward, natural_reward,
                      social_utility, svo_reward, u_ego, w_distance)
from .risk import EpisodeRisk, RiskError, lateral_jerk, traj_smoothness
from .sim import ACTION_BOUNDS, Action, EnvConfig, EpisodeTrace, reset_from_scenario, step
from .svg import trace_svg
from .trainer import TrainerConfig, sample_actions


def generate_episode(policy: Network, scenario: Scenario, cfg: TrainerConfig, rng: np.random.Generator,
                     expert_actions: Optional[np.ndarray] = None, greedy: bool = False,
                     svo: Optional[SVOConfig] = None) -> EpisodeTrace:
    """One closed-loop episode with per-step reward columns.

    The naturalness term uses the W-distance between this episode's actions
    and an equally sized sample of ``expert_actions`` (zero term if absent).
    """
    svo = svo or cfg.svo()
    env_cfg = EnvConfig(n_vehicles=cfg.n_vehicles, adversary_role=cfg.adversary_role)
    state, fm = reset_from_scenario(scenario, env_cfg)
    trace = EpisodeTrace(scenario.scenario_id)
    trace.record(state)
    phi = 0.0
    actions, parts = [], []
    while not state.terminal:
        _, a, _, _ = sample_actions(policy, fm.rows[None], fm.mask[None], rng, greedy)
        act = Action(*a[0])
        state, fm, info = step(state, act)
        trace.record(state, info.collision)
        ue = float(u_ego(info.adversary_speed))
        usv, _ = social_utility(fm.rows, fm.mask, svo)
        r_svo, phi_new = svo_reward(ue, float(usv), svo, phi)
        phi = float(phi_new)
        parts.append({"step": state.step_index, "r_svo": float(r_svo),
                      "r_dist": float(distance_reward(info.distance, info.initial_distance)),
                      "r_coll": collision_reward(info.collision), "u_ego": ue, "u_sv": float(usv), "phi": phi})
        actions.append([act.accel, act.steer])
    acts = np.asarray(actions) / ACTION_BOUNDS
    w = 0.0
    r_nat = 0.0
    if expert_actions is not None and len(acts) >= 2:
        idx = rng.integers(0, len(expert_actions), len(acts))
        w = w_distance(BatchStats.from_samples(acts), BatchStats.from_samples(expert_actions[idx] / ACTION_BOUNDS))
        r_nat = float(natural_reward(w, cfg.theta_w))
    for p in parts:
        k = p.pop("step")
        br = compose(r_nat, beta=cfg.beta, w1=cfg.w1, w2=cfg.w2, w=w, **p)
        trace.rewards.append({"step": k, **br.to_dict()})
    return trace


def trace_series(trace: EpisodeTrace) -> dict:
    roles = sorted({r["role"] for r in trace.rows})
    return {role: (s["x"], s["y"]) for role in roles for s in [trace.series(role)]}


def write_episode(trace: EpisodeTrace, out_dir, index: int) -> List[Path]:
    out = Path(out_dir)
    csv_path = out / f"episode_{index:03d}.csv"
    svg_path = out / f"episode_{index:03d}.svg"
    trace.write_csv(csv_path)
    svg_path.write_text(trace_svg(trace_series(trace), title=trace.scenario_id))
    return [csv_path, svg_path]


def episode_risk(trace: EpisodeTrace, dt: float, episode_id: Optional[str] = None) -> EpisodeRisk:
    """Comfort proxies of the adversary's lateral motion; series too short for a proxy score zero."""
    y = trace.series("adversary")["y"]
    jerk = lateral_jerk(y, dt) if len(y) >= 4 else 0.0
    smooth = traj_smoothness(y) if len(y) >= 3 else 0.0
    return EpisodeRisk(episode_id or trace.scenario_id, jerk, smooth, trace.collided_with_ego)


def load_traces(directory) -> List[EpisodeTrace]:
    paths = sorted(Path(directory).glob("episode_*.csv"))
    if not paths:
        raise RiskError(f"{directory}: no episode_*.csv traces found")
    return [EpisodeTrace.read_csv(p) for p in paths]


def generate_episodes(policy: Network, catalog: Sequence[Scenario], cfg: TrainerConfig, n: int, seed: int,
                      expert_actions: Optional[np.ndarray] = None, greedy: bool = False,
                      svo: Optional[SVOConfig] = None) -> List[EpisodeTrace]:
    """``n`` episodes, cycling through the catalog in order."""
    rng = np.random.default_rng([seed, 2])
    return [generate_episode(policy, catalog[i % len(catalog)], cfg, rng, expert_actions, greedy, svo)
            for i in range(n)]
