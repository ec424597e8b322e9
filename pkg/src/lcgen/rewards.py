"""Reward terms for the adversarial vehicle and their composition.

All functions are pure. Scalar and batched (numpy array) inputs are both
accepted where it makes sense; the adaptive SVO angle is carried explicitly
by the caller.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence, Tuple, Union

import numpy as np

SVO_MODES = ("fixed", "adaptive", "none")
V_REF = 30.0
U_EGO_MAX = 2.0


@dataclass(frozen=True)
class BatchStats:
    """Per-dimension mean and diagonal variance of a batch of actions."""

    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "var", np.atleast_1d(np.asarray(self.var, dtype=float)))
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.var < 0):
            raise ValueError("variances must be non-negative")
        if self.count < 2:
            raise ValueError("batch statistics need at least two samples")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_samples(cls, samples) -> "BatchStats":
        a = np.asarray(samples, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if len(a) < 2:
            raise ValueError("batch statistics need at least two samples")
        return cls(a.mean(axis=0), a.var(axis=0, ddof=1), len(a))


def _w_single(p1: BatchStats, p2: BatchStats) -> float:
    if p1.dim != p2.dim:
        raise ValueError(f"dimension mismatch: {p1.dim} vs {p2.dim}")
    mean_term = float(np.sum((p1.mean - p2.mean) ** 2))
    cov_term = float(np.sum((np.sqrt(p1.var) - np.sqrt(p2.var)) ** 2))
    return mean_term + cov_term


def w_distance(p1: Union[BatchStats, Sequence[BatchStats]], p2: Union[BatchStats, Sequence[BatchStats]]) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians, averaged over batch pairs."""
    if isinstance(p1, BatchStats) and isinstance(p2, BatchStats):
        return _w_single(p1, p2)
    p1 = [p1] if isinstance(p1, BatchStats) else list(p1)
    p2 = [p2] if isinstance(p2, BatchStats) else list(p2)
    if len(p1) != len(p2) or not p1:
        raise ValueError("need equally many (and at least one) batches on each side")
    return sum(_w_single(a, b) for a, b in zip(p1, p2)) / len(p1)


def natural_reward(w, theta_w: float = 0.9):
    if not theta_w > 0:
        raise ValueError("theta_w must be positive")
    return np.clip((theta_w - np.asarray(w, dtype=float)) / theta_w, 0.0, 1.0)


@dataclass(frozen=True)
class SVOConfig:
    mode: str = "adaptive"
    phi: float = 0.0
    beta0: float = 1.0
    beta1: float = 1.0
    smoothing: float = 0.9
    eps: float = 1e-6

    def __post_init__(self):
        if self.mode not in SVO_MODES:
            raise ValueError(f"SVO mode must be one of {SVO_MODES}, got {self.mode!r}")
        if self.mode == "fixed" and not -math.pi / 2 <= self.phi <= math.pi / 2:
            raise ValueError("fixed SVO angle must lie in [-pi/2, pi/2]")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError("smoothing must lie in [0, 1]")
        if not all(math.isfinite(v) for v in (self.beta0, self.beta1, self.eps, self.phi)):
            raise ValueError("SVO weights must be finite")

    @classmethod
    def fixed_degrees(cls, degrees: float, **kw) -> "SVOConfig":
        return cls(mode="fixed", phi=math.radians(degrees), **kw)


def social_utility(rows, mask, cfg: SVOConfig = SVOConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Priority-weighted sum of closing speeds of surrounding vehicles.

    ``rows`` has shape ``(..., V, 9)``; returns ``(U_sv, S)`` with ``S`` of
    shape ``(..., V)`` (zero on masked rows).
    """
    rows = np.asarray(rows, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    x, y, vx, vy, prio = rows[..., 1], rows[..., 2], rows[..., 3], rows[..., 4], rows[..., 7]
    r = np.hypot(x, y)
    s = np.maximum(0.0, -(x * vx + y * vy) / (r + cfg.eps))
    s = np.where(mask, s, 0.0)
    u = ((cfg.beta0 + cfg.beta1 * prio) * s).sum(axis=-1)
    return u, s


def svo_reward(u_ego, u_sv, cfg: SVOConfig, phi_prev=0.0):
    """Returns ``(R_SVO, phi_t)``; mode ``none`` gives zero reward and keeps ``phi_prev``."""
    u_ego = np.asarray(u_ego, dtype=float)
    u_sv = np.asarray(u_sv, dtype=float)
    if cfg.mode == "none":
        return np.zeros(np.broadcast(u_ego, u_sv).shape), np.asarray(phi_prev, dtype=float)
    if cfg.mode == "fixed":
        phi = np.full(np.broadcast(u_ego, u_sv).shape, cfg.phi)
    else:
        lam = cfg.smoothing
        phi = lam * np.asarray(phi_prev, dtype=float) + (1.0 - lam) * np.arctan2(u_sv, u_ego)
    return u_ego * np.cos(phi) + u_sv * np.sin(phi), phi


def u_ego(speed, v_ref: float = V_REF):
    """Normalized progress of the controlled vehicle, clipped to [0, 2]."""
    return np.clip(np.asarray(speed, dtype=float) / v_ref, 0.0, U_EGO_MAX)


def distance_reward(distance, initial_distance):
    d0 = np.asarray(initial_distance, dtype=float)
    if np.any(d0 <= 0):
        raise ValueError("initial distance must be positive")
    return np.clip(1.0 - np.asarray(distance, dtype=float) / d0, -1.0, 1.0)


def collision_reward(adv_hit_ego, adv_hit_background=False):
    """1 for hitting the ego, -1 for hitting only background traffic, else 0.

    Accepts a :class:`~lcgen.sim.CollisionReport` as the first argument.
    """
    if hasattr(adv_hit_ego, "adv_hit_ego"):
        rep = adv_hit_ego
        adv_hit_ego, adv_hit_background = rep.adv_hit_ego, rep.adv_hit_background
    ego = np.asarray(adv_hit_ego, dtype=bool)
    bg = np.asarray(adv_hit_background, dtype=bool)
    out = np.where(ego, 1.0, np.where(bg, -1.0, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RewardBreakdown:
    r_natural: float
    r_svo: float
    r_dist: float
    r_coll: float
    r_adv: float
    total: float
    adv_score: float
    u_ego: float = 0.0
    u_sv: float = 0.0
    phi: float = 0.0
    w: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def normalized_weights(w1: float, w2: float) -> Tuple[float, float]:
    s = w1 + w2
    if not (s > 0 and w1 >= 0 and w2 >= 0):
        raise ValueError("reward weights must be non-negative with a positive sum")
    return w1 / s, w2 / s


def total_reward(r_natural, r_svo, r_dist, r_coll, beta: float = 1.0, w1: float = 6.0, w2: float = 4.0):
    """Array form of :func:`compose`; returns ``(r_adv, total, adv_score)``."""
    a, b = normalized_weights(w1, w2)
    r_adv = np.asarray(r_svo) + np.asarray(r_dist) + np.asarray(r_coll)
    return r_adv, a * np.asarray(r_natural) + b * r_adv, np.asarray(r_svo) + beta * r_adv


def compose(r_natural: float, r_svo: float, r_dist: float, r_coll: float, beta: float = 1.0,
            w1: float = 6.0, w2: float = 4.0, **diagnostics) -> RewardBreakdown:
    r_adv, total, score = total_reward(r_natural, r_svo, r_dist, r_coll, beta, w1, w2)
    return RewardBreakdown(float(r_natural), float(r_svo), float(r_dist), float(r_coll), float(r_adv),
                           float(total), float(score), **{k: float(v) for k, v in diagnostics.items()})
