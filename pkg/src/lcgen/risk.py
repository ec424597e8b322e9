"""Dangerousness scoring of generated episodes.

An episode's comfort proxies are the mean absolute lateral jerk and the mean
absolute second difference of lateral position. Both are mapped to [0, 1]
between thresholds calibrated on expert (logged) motion, then combined with
the ego-adversary collision rate into a convex score.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mining import Scenario
from .sim import EnvConfig, _prepare_replay

DEFAULT_WEIGHTS = (0.8, 0.1, 0.1)
MIN_EXPERT_EPISODES = 20


class RiskError(ValueError):
    pass


def lateral_jerk(y, dt: float) -> float:
    y = np.asarray(y, dtype=float)
    if len(y) < 4:
        raise RiskError("lateral jerk needs at least 4 samples")
    if not dt > 0:
        raise RiskError("dt must be positive")
    j = np.diff(y, n=3) / dt ** 3
    return float(np.mean(np.abs(j)))


def traj_smoothness(y) -> float:
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        raise RiskError("smoothness needs at least 3 samples")
    return float(np.mean(np.abs(np.diff(y, n=2))))


def normalize_psi(x, lo: float, hi: float):
    if not lo < hi:
        raise RiskError(f"need lower threshold < upper threshold, got {lo} >= {hi}")
    return np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def collision_rate(collided: Sequence[bool]) -> float:
    if len(collided) == 0:
        raise RiskError("collision rate needs at least one episode")
    return float(np.mean(np.asarray(collided, dtype=bool)))


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    rank = max(1, int(math.ceil(q * len(v) - 1e-12)))
    return float(v[rank - 1])


@dataclass(frozen=True)
class EpisodeRisk:
    episode_id: str
    jerk: float
    smoothness: float
    collided: bool = False

    @classmethod
    def from_lateral(cls, episode_id: str, y, dt: float, collided: bool = False) -> "EpisodeRisk":
        return cls(episode_id, lateral_jerk(y, dt), traj_smoothness(y), bool(collided))


@dataclass(frozen=True)
class RiskThresholds:
    jerk_lo: float
    jerk_hi: float
    smooth_lo: float
    smooth_hi: float
    q_lo: float = 0.75
    q_hi: float = 0.95

    def __post_init__(self):
        if not self.jerk_lo < self.jerk_hi or not self.smooth_lo < self.smooth_hi:
            raise RiskError("each threshold pair needs lower < upper")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RiskThresholds":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RiskThresholds":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise RiskError(f"{path}: cannot read thresholds ({exc})") from None


def calibrate_thresholds(expert: Sequence[EpisodeRisk], q_lo: float = 0.75, q_hi: float = 0.95) -> RiskThresholds:
    if len(expert) < MIN_EXPERT_EPISODES:
        raise RiskError(f"calibration needs at least {MIN_EXPERT_EPISODES} expert episodes, got {len(expert)}")
    jerk = [e.jerk for e in expert]
    smooth = [e.smoothness for e in expert]
    jl, jh = nearest_rank(jerk, q_lo), nearest_rank(jerk, q_hi)
    sl, sh = nearest_rank(smooth, q_lo), nearest_rank(smooth, q_hi)
    if not (jl < jh and sl < sh):
        raise RiskError("expert proxies are degenerate at the calibration quantiles; use a wider corpus")
    return RiskThresholds(jl, jh, sl, sh, q_lo, q_hi)


def expert_episodes(catalog: Sequence[Scenario], role: Optional[str] = None) -> List[EpisodeRisk]:
    """Proxies of the logged motion of the vehicle an adversary would replace."""
    out = []
    for s in catalog:
        rp = _prepare_replay(s, EnvConfig(adversary_role=role))
        out.append(EpisodeRisk.from_lateral(s.scenario_id, rp.adv_log[:, 1], s.dt, False))
    return out


@dataclass(frozen=True)
class RiskReport:
    episodes: Tuple[EpisodeRisk, ...]
    thresholds: RiskThresholds
    weights: Tuple[float, float, float] = DEFAULT_WEIGHTS
    aggregation: str = "mean"
    c_coll: float = 0.0
    jerk: float = 0.0
    smoothness: float = 0.0
    psi_a: float = 0.0
    psi_t: float = 0.0
    d_risk: float = 0.0

    @property
    def danger_pct(self) -> float:
        return 100.0 * self.d_risk

    @property
    def collision_pct(self) -> float:
        return 100.0 * self.c_coll

    def aggregate(self) -> dict:
        return {"c_coll": self.c_coll, "jerk": self.jerk, "smoothness": self.smoothness, "psi_a": self.psi_a,
                "psi_t": self.psi_t, "d_risk": self.d_risk, "danger_pct": self.danger_pct,
                "collision_pct": self.collision_pct, "n_episodes": len(self.episodes)}

    def to_dict(self) -> dict:
        return {"episodes": [asdict(e) for e in self.episodes], "aggregate": self.aggregate(),
                "thresholds": self.thresholds.to_dict(), "weights": list(self.weights),
                "aggregation": self.aggregation}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode_id", "jerk", "smoothness", "collided"])
            for e in self.episodes:
                w.writerow([e.episode_id, repr(e.jerk), repr(e.smoothness), int(e.collided)])
            agg = self.aggregate()
            for k in ("c_coll", "jerk", "smoothness", "psi_a", "psi_t", "d_risk"):
                w.writerow([f"aggregate:{k}", repr(float(agg[k])), "", ""])


def dangerousness(episodes: Sequence[EpisodeRisk], thresholds: RiskThresholds,
                  weights: Sequence[float] = DEFAULT_WEIGHTS, aggregation: str = "mean") -> RiskReport:
    weights = tuple(float(w) for w in weights)
    if len(weights) != 3 or min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-9:
        raise RiskError(f"weights must be three non-negative numbers summing to 1, got {weights}")
    if aggregation not in ("mean", "median"):
        raise RiskError("aggregation must be 'mean' or 'median'")
    if not episodes:
        raise RiskError("no episodes to score")
    agg = np.mean if aggregation == "mean" else np.median
    c = collision_rate([e.collided for e in episodes])
    jerk = float(agg([e.jerk for e in episodes]))
    smooth = float(agg([e.smoothness for e in episodes]))
    pa = float(normalize_psi(jerk, thresholds.jerk_lo, thresholds.jerk_hi))
    pt = float(normalize_psi(smooth, thresholds.smooth_lo, thresholds.smooth_hi))
    wc, wa, wt = weights
    d = wc * c + wa * pa + wt * pt
    return RiskReport(tuple(episodes), thresholds, weights, aggregation, c, jerk, smooth, pa, pt, d)
