"""Textbook clipped-PPO step written without the package's surrogate or optimizer."""
import math

import numpy as np

from lcgen.sim import ACTION_BOUNDS, scale_features


def _log_prob(u, mean, log_std):
    z = (u - mean) / np.exp(log_std)
    gauss = np.sum(-0.5 * z ** 2 - log_std - 0.5 * math.log(2 * math.pi), axis=-1)
    jac = np.sum(np.log(ACTION_BOUNDS * (1.0 - np.tanh(u) ** 2)), axis=-1)
    return gauss - jac


def reference_clipped_ppo(net, batch, rng, eps=0.2, epochs=4, minibatch=256, lr=2e-4, vcoef=0.5, ecoef=0.01,
                          max_norm=0.5):
    """Mutates ``net.params`` with plain clipped PPO and Adam; returns the delta."""
    start = net.params.copy()
    m = np.zeros(net.n_params)
    v = np.zeros(net.n_params)
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(len(batch))
        for s in range(0, len(batch), minibatch):
            idx = perm[s:s + minibatch]
            n = len(idx)
            out, cache = net.forward(scale_features(batch.rows[idx]), batch.mask[idx], heads=("policy", "value"))
            mean, log_std = out["mean"], out["log_std"]
            u = batch.u[idx]
            r = np.exp(_log_prob(u, mean, log_std) - batch.logp[idx])
            A = batch.advantages[idx]
            # d/dr of -min(rA, clip(r)A): -A where the unclipped branch is active, else 0
            unclipped = r * A <= np.clip(r, 1 - eps, 1 + eps) * A
            dr = np.where(unclipped, -A, 0.0) / n
            dlogp = dr * r
            sig2 = np.exp(2 * log_std)
            up = {
                "mean": dlogp[:, None] * (u - mean) / sig2,
                "log_std": np.sum(dlogp[:, None] * ((u - mean) ** 2 / sig2 - 1.0), axis=0) - ecoef,
                "value": vcoef * (out["value"] - batch.returns[idx]) / n,
            }
            g = net.backward(cache, up)
            norm = math.sqrt(float(g @ g))
            if norm > max_norm:
                g = g * (max_norm / (norm + 1e-12))
            t += 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            net.params -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return net.params - start
