"""Leaky-clipped PPO: advantage estimation, surrogate, update step, resets, replay."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .nn import Adam, Network, clip_grad_norm, gaussian_log_prob, reset_last_layers, squash_log_det
from .sim import ACTION_BOUNDS, scale_features


class TrainingError(RuntimeError):
    pass


def compute_gae(rewards, values, dones, last_values, gamma: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimation over ``(T, n_envs)`` arrays.

    ``dones[t]`` marks that the episode ended after step ``t``; such steps
    bootstrap with zero. ``last_values`` bootstraps unfinished episodes.
    Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty rollout")
    if r.ndim == 1:
        r = r[:, None]
    v = np.asarray(values, dtype=float).reshape(r.shape)
    d = np.asarray(dones, dtype=bool).reshape(r.shape)
    nxt = np.asarray(last_values, dtype=float).reshape(r.shape[1:])
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        live = ~d[t]
        delta = r[t] + gamma * nxt * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        nxt = v[t]
    ret = adv + v
    if np.ndim(rewards) == 1:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def leaky_bounds(r, eps: float = 0.2, alpha: float = 0.01):
    r = np.asarray(r, dtype=float)
    return alpha * r + (1 - alpha) * (1 - eps), alpha * r + (1 - alpha) * (1 + eps)


def leaky_surrogate(r, adv, eps: float = 0.2, alpha: float = 0.01):
    """Value of ``min(r A, clip(r, l, u) A)`` and its derivative in ``r``."""
    r = np.asarray(r, dtype=float)
    adv = np.asarray(adv, dtype=float)
    lo, hi = leaky_bounds(r, eps, alpha)
    clipped = np.clip(r, lo, hi)
    unclipped_v = r * adv
    clipped_v = clipped * adv
    value = np.minimum(unclipped_v, clipped_v)
    # clip(r, l, u) = r inside [1-eps, 1+eps], slope alpha outside it
    clip_slope = np.where((r < 1 - eps) | (r > 1 + eps), alpha, 1.0)
    deriv = np.where(unclipped_v <= clipped_v, adv, clip_slope * adv)
    return value, deriv


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    sd = adv.std()
    return (adv - adv.mean()) / (sd if sd > 1e-12 else 1.0)


@dataclass(eq=False)
class RolloutBatch:
    """Flat transitions; ``u`` are pre-squash actions, ``logp`` includes the squash correction."""

    rows: np.ndarray
    mask: np.ndarray
    u: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        n = len(self.u)
        for name in ("rows", "mask", "logp", "rewards", "values", "dones", "advantages", "returns"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"rollout field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.u)


@dataclass(frozen=True)
class PPOSettings:
    eps_clip: float = 0.2
    alpha: float = 0.01
    epochs: int = 4
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    min_batch: int = 2

    def __post_init__(self):
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must lie in (0, 1)")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


@dataclass(frozen=True)
class UpdateStats:
    policy_loss: float
    value_loss: float
    mean_ratio: float
    fraction_saturated: float
    grad_norm: float


def policy_gradients(net: Network, batch: RolloutBatch, idx: np.ndarray, s: PPOSettings,
                     surrogate=leaky_surrogate):
    """Loss gradient on one minibatch; returns ``(grad, stats dict)``.

    ``surrogate(r, A, eps, alpha)`` must return ``(value, d value / d r)``.
    """
    out, cache = net.forward(scale_features(batch.rows[idx]), batch.mask[idx], heads=("policy", "value"))
    mean, log_std = out["mean"], out["log_std"]
    u = batch.u[idx]
    n = len(idx)
    logp = gaussian_log_prob(u, mean, log_std) - squash_log_det(u, ACTION_BOUNDS)
    ratio = np.exp(logp - batch.logp[idx])
    adv = batch.advantages[idx]
    surr, dsurr = surrogate(ratio, adv, s.eps_clip, s.alpha)
    verr = out["value"] - batch.returns[idx]
    ent = float(np.sum(log_std + 0.5 * math.log(2 * math.pi * math.e)))
    policy_loss = -float(surr.mean())
    value_loss = 0.5 * float(np.mean(verr ** 2))
    loss = policy_loss + s.value_coef * value_loss - s.entropy_coef * ent
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite PPO loss (policy {policy_loss}, value {value_loss})")
    dlogp = -dsurr * ratio / n
    inv_var = np.exp(-2 * log_std)
    z = (u - mean)
    up = {
        "mean": dlogp[:, None] * z * inv_var,
        "log_std": (dlogp[:, None] * (z * z * inv_var - 1.0)).sum(axis=0) - s.entropy_coef,
        "value": s.value_coef * verr / n,
    }
    grad = net.backward(cache, up)
    sat = float(np.mean((ratio < 1 - s.eps_clip) | (ratio > 1 + s.eps_clip)))
    return grad, {"policy_loss": policy_loss, "value_loss": value_loss, "ratio": float(ratio.mean()), "sat": sat}


def ppo_update(net: Network, opt: Adam, batch: RolloutBatch, s: PPOSettings, rng: np.random.Generator,
               surrogate=leaky_surrogate) -> UpdateStats:
    """K epochs of shuffled minibatch steps; modifies ``net.params`` in place."""
    if len(batch) < s.min_batch:
        raise ValueError(f"rollout batch of {len(batch)} is below the minimum {s.min_batch}")
    acc = {"policy_loss": [], "value_loss": [], "ratio": [], "sat": [], "norm": []}
    for _ in range(s.epochs):
        perm = rng.permutation(len(batch))
        for start in range(0, len(batch), s.minibatch):
            idx = perm[start:start + s.minibatch]
            grad, st = policy_gradients(net, batch, idx, s, surrogate)
            if not np.all(np.isfinite(grad)):
                raise TrainingError("non-finite gradient in PPO update")
            grad, norm = clip_grad_norm(grad, s.max_grad_norm)
            opt.step(net.params, grad)
            for k, v in st.items():
                acc[k].append(v)
            acc["norm"].append(norm)
    return UpdateStats(float(np.mean(acc["policy_loss"])), float(np.mean(acc["value_loss"])),
                       float(np.mean(acc["ratio"])), float(np.mean(acc["sat"])), float(np.mean(acc["norm"])))


class ReplayBuffer:
    """FIFO ring of generated (features, mask, action) transitions."""

    def __init__(self, capacity: int, n_vehicles: int = 8, n_features: int = 9, action_dim: int = 2):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.rows = np.zeros((capacity, n_vehicles, n_features))
        self.mask = np.zeros((capacity, n_vehicles), bool)
        self.actions = np.zeros((capacity, action_dim))
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, rows, mask, actions) -> None:
        rows, mask, actions = np.asarray(rows), np.asarray(mask), np.asarray(actions)
        n = len(actions)
        if n > self.capacity:
            rows, mask, actions = rows[-self.capacity:], mask[-self.capacity:], actions[-self.capacity:]
            self.inserted += n - self.capacity
            n = self.capacity
        pos = (self.inserted + np.arange(n)) % self.capacity
        self.rows[pos] = rows
        self.mask[pos] = mask
        self.actions[pos] = actions
        self.inserted += n

    def sample(self, rng: np.random.Generator, n: int):
        if not len(self):
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, len(self), n)
        return self.rows[idx], self.mask[idx], self.actions[idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.rows, self.mask, self.actions):
            h.update(a.tobytes())
        h.update(str(self.inserted).encode())
        return h.hexdigest()


def reset_due(iteration: int, interval: int) -> bool:
    return interval > 0 and iteration > 0 and iteration % interval == 0


def apply_resets(net: Network, opt: Optional[Adam], iteration: int, base_seed: int, interval: int = 1000,
                 n_layers: int = 3) -> Tuple[Network, bool]:
    """Re-draw the last ``n_layers`` of every head when a reset is due.

    The new values come from seed ``base_seed + iteration``; Adam moments of
    the re-drawn slices are zeroed. Returns ``(network, reset_flag)``.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if not reset_due(iteration, interval):
        return net, False
    new = reset_last_layers(net, n_layers, base_seed + iteration)
    if opt is not None:
        for layer in net.last_layers(n_layers):
            opt.zero_slice(net.layer_slice(layer))
    return new, True
