"""Expert state-action extraction, discriminator training and imitation reward."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ingest import wrap_angle
from .mining import Scenario
from .nn import Adam, Layout, Network, sigmoid, init_network
from .sim import (ACCEL_MAX, ACTION_BOUNDS, STEER_MAX, WHEELBASE_RATIO, Action, EnvConfig, FeatureMatrix,
                  _prepare_replay, encode_relative, scale_features)

IMITATION_CLIP = 10.0
MIN_SPEED = 1e-3


def inverse_kinematics(speed, heading, length: float, dt: float) -> np.ndarray:
    """Actions ``(T-1, 2)`` that reproduce a logged speed/heading sequence."""
    speed = np.asarray(speed, dtype=float)
    heading = np.asarray(heading, dtype=float)
    accel = np.diff(speed) / dt
    dh = wrap_angle(np.diff(heading))
    v = speed[:-1]
    moving = v > MIN_SPEED
    steer = np.zeros_like(v)
    steer[moving] = np.arctan(dh[moving] * WHEELBASE_RATIO * length / (v[moving] * dt))
    return np.stack([np.clip(accel, -ACCEL_MAX, ACCEL_MAX), np.clip(steer, -STEER_MAX, STEER_MAX)], axis=-1)


def expert_arrays(s: Scenario, role: Optional[str] = None, n_vehicles: int = 8):
    """Vectorized expert pairs: features ``(T-1, V, 9)``, mask, actions ``(T-1, 2)``."""
    rp = _prepare_replay(s, EnvConfig(n_vehicles=n_vehicles, adversary_role=role))
    adv = rp.adv_log
    o = rp.pos.transpose(1, 0, 2)  # (T, K, 4)
    rows, mask = encode_relative(adv[:, 0], adv[:, 1], adv[:, 3], adv[:, 2], o[..., 0], o[..., 1], o[..., 3],
                                 o[..., 2], rp.prio.T, np.ones(o.shape[:2], bool), n_vehicles)
    actions = inverse_kinematics(adv[:, 2], adv[:, 3], float(rp.adv_size[0]), s.dt)
    return rows[:-1], mask[:-1], actions


def derive_expert_actions(s: Scenario, role: Optional[str] = None, n_vehicles: int = 8) -> List[Tuple[FeatureMatrix, Action]]:
    rows, mask, actions = expert_arrays(s, role, n_vehicles)
    return [(FeatureMatrix(r, m), Action(*a)) for r, m, a in zip(rows, mask, actions)]


@dataclass(frozen=True, eq=False)
class ExpertBuffer:
    rows: np.ndarray
    mask: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_catalog(cls, catalog: Sequence[Scenario], role: Optional[str] = None, n_vehicles: int = 8) -> "ExpertBuffer":
        parts = [expert_arrays(s, role, n_vehicles) for s in catalog]
        if not parts:
            raise ValueError("expert buffer needs at least one scenario")
        rows, mask, actions = (np.concatenate(p) for p in zip(*parts))
        if not len(actions):
            raise ValueError("expert buffer is empty")
        return cls(rows, mask, actions)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self), n)
        return self.rows[idx], self.mask[idx], self.actions[idx]


@dataclass(frozen=True, eq=False)
class DiscBatch:
    """Expert half labelled 1, generated half labelled 0."""

    rows: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    labels: np.ndarray

    @classmethod
    def balanced(cls, expert, generated) -> "DiscBatch":
        (er, em, ea), (gr, gm, ga) = expert, generated
        if len(ea) != len(ga):
            raise ValueError("expert and generated halves must be the same size")
        return cls(np.concatenate([er, gr]), np.concatenate([em, gm]), np.concatenate([ea, ga]),
                   np.concatenate([np.ones(len(ea)), np.zeros(len(ga))]))

    def __len__(self) -> int:
        return len(self.labels)


def disc_layout(**kw) -> Layout:
    return Layout(heads=("disc",), **kw)


def disc_logits(net: Network, rows, mask, actions):
    out, cache = net.forward(scale_features(rows), mask, np.asarray(actions) / ACTION_BOUNDS, heads=("disc",))
    return out["disc_logit"], cache


def disc_probability(net: Network, rows, mask, actions) -> np.ndarray:
    z, _ = disc_logits(net, rows, mask, actions)
    return np.clip(sigmoid(z), 1e-12, 1 - 1e-12)


def bce_with_logits(z, y) -> float:
    z = np.asarray(z, dtype=float)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def disc_update(net: Network, batch: DiscBatch, lr: float = 3e-4, opt: Optional[Adam] = None) -> float:
    """One Adam step on binary cross-entropy; returns the loss before the step."""
    if len(batch) == 0:
        raise ValueError("empty discriminator batch")
    opt = opt or Adam(net.n_params, lr)
    z, cache = disc_logits(net, batch.rows, batch.mask, batch.actions)
    loss = bce_with_logits(z, batch.labels)
    if not math.isfinite(loss):
        raise FloatingPointError("discriminator loss is not finite")
    dz = (sigmoid(z) - batch.labels) / len(batch)
    grad = net.backward(cache, {"disc_logit": dz})
    opt.step(net.params, grad)
    return loss


def imitation_reward(d):
    d = np.clip(np.asarray(d, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        r = -np.log1p(-d)
    return np.clip(r, 0.0, IMITATION_CLIP)


def new_discriminator(seed: int = 0, lr: float = 3e-4, **layout_kw) -> Tuple[Network, Adam]:
    net = init_network(disc_layout(**layout_kw), seed)
    return net, Adam(net.n_params, lr)
