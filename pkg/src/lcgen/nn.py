"""Set-attention networks with hand-written backpropagation.

A network maps a batch of feature matrices ``X (N, V, F)`` with presence mask
``M (N, V)`` to one or more heads:

* shared per-vehicle projection ``tanh(X Wp + bp)``;
* ``n_layers`` residual multi-head self-attention blocks,
  ``h <- h + tanh(MHA(h) Wo + bo)``, attending over present vehicles only;
* mean pooling over present vehicles (zero when none are present);
* MLP heads: ``policy`` (Gaussian mean plus a free log-std vector),
  ``value`` (scalar) and ``disc`` (logit of the embedding concatenated with
  an action).

Rows are put into a canonical order before encoding, which makes the
embedding exactly invariant to the order in which vehicles are listed.
All parameters live in one flat float64 vector; every layer owns a
contiguous slice of it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

HEAD_KINDS = ("policy", "value", "disc")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
MASK_BIAS = -1e300
CHECKPOINT_MAGIC = b"LCGENCKPT\n"
CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    n_features: int = 9
    n_vehicles: int = 8
    embed_dim: int = 32
    n_heads: int = 2
    n_layers: int = 2
    hidden: Tuple[int, ...] = (64, 64)
    action_dim: int = 2
    heads: Tuple[str, ...] = ("policy", "value")
    log_std_init: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "heads", tuple(self.heads))

    def validate(self) -> None:
        if not 1 <= self.n_heads <= 4:
            raise LayoutError(f"n_heads must be in [1, 4], got {self.n_heads}")
        if not 2 <= self.n_layers <= 4:
            raise LayoutError(f"n_layers must be in [2, 4], got {self.n_layers}")
        if self.embed_dim % self.n_heads:
            raise LayoutError("embed_dim must be divisible by n_heads")
        if min(self.n_features, self.n_vehicles, self.embed_dim, self.action_dim) < 1:
            raise LayoutError("dimensions must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise LayoutError("need at least one positive hidden width")
        if not self.heads or any(h not in HEAD_KINDS for h in self.heads) or len(set(self.heads)) != len(self.heads):
            raise LayoutError(f"heads must be distinct members of {HEAD_KINDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls(**{**d, "hidden": tuple(d["hidden"]), "heads": tuple(d["heads"])})


@dataclass(frozen=True)
class _Param:
    name: str
    shape: Tuple[int, ...]
    layer: str
    fan_in: int
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _param_table(layout: Layout) -> Tuple[List[_Param], List[str]]:
    d = layout.embed_dim
    specs: List[Tuple[str, Tuple[int, ...], str, int]] = [
        ("proj.W", (layout.n_features, d), "proj", layout.n_features),
        ("proj.b", (d,), "proj", layout.n_features),
    ]
    for l in range(layout.n_layers):
        g = f"attn{l}"
        specs.append((f"{g}.Wqkv", (d, 3 * d), g, d))
        specs.append((f"{g}.Wo", (d, d), g, d))
        specs.append((f"{g}.bo", (d,), g, d))
    for head in layout.heads:
        width_in = d + layout.action_dim if head == "disc" else d
        out = {"policy": layout.action_dim, "value": 1, "disc": 1}[head]
        dims = (width_in,) + layout.hidden
        for j in range(len(layout.hidden)):
            g = f"{head}.fc{j}"
            specs.append((g + ".W", (dims[j], dims[j + 1]), g, dims[j]))
            specs.append((g + ".b", (dims[j + 1],), g, dims[j]))
        g = f"{head}.out"
        specs.append((g + ".W", (dims[-1], out), g, dims[-1]))
        specs.append((g + ".b", (out,), g, dims[-1]))
        if head == "policy":
            specs.append(("policy.log_std", (layout.action_dim,), g, 0))
    table, off = [], 0
    layers: List[str] = []
    for name, shape, layer, fan_in in specs:
        p = _Param(name, shape, layer, fan_in, off)
        off += p.size
        table.append(p)
        if layer not in layers:
            layers.append(layer)
    return table, layers


def _init_layer(layout: Layout, table: Sequence[_Param], layer: str, layer_idx: int, seed: int,
                out: np.ndarray) -> None:
    rng = np.random.default_rng([int(seed), layer_idx])
    for p in table:
        if p.layer != layer:
            continue
        if p.name == "policy.log_std":
            vals = np.full(p.shape, layout.log_std_init)
        else:
            bound = 1.0 / np.sqrt(p.fan_in)
            vals = rng.uniform(-bound, bound, p.shape)
        out[p.offset:p.offset + p.size] = vals.ravel()


class Network:
    """Parameters plus layout; see :func:`init_network`."""

    def __init__(self, layout: Layout, params: np.ndarray, seeds: Optional[dict] = None):
        layout.validate()
        self.layout = layout
        self.table, self.layers = _param_table(layout)
        n = sum(p.size for p in self.table)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise LayoutError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.seeds = dict(seeds or {})
        self._index = {p.name: p for p in self.table}

    @property
    def n_params(self) -> int:
        return len(self.params)

    def copy(self) -> "Network":
        return Network(self.layout, self.params.copy(), self.seeds)

    def p(self, name: str) -> np.ndarray:
        q = self._index[name]
        return self.params[q.offset:q.offset + q.size].reshape(q.shape)

    def layer_slice(self, layer: str) -> slice:
        ps = [p for p in self.table if p.layer == layer]
        return slice(ps[0].offset, ps[-1].offset + ps[-1].size)

    def head_path(self, head: str) -> List[str]:
        """Layers traversed from input to the output of ``head``."""
        return ["proj"] + [f"attn{l}" for l in range(self.layout.n_layers)] + \
            [f"{head}.fc{j}" for j in range(len(self.layout.hidden))] + [f"{head}.out"]

    def last_layers(self, k: int) -> List[str]:
        """Union over heads of the final ``k`` layers on each head path."""
        depth = len(self.head_path(self.layout.heads[0]))
        if not 0 <= k <= depth:
            raise LayoutError(f"cannot reset {k} layers of a {depth}-layer network")
        chosen = set()
        for h in self.layout.heads:
            chosen.update(self.head_path(h)[depth - k:] if k else [])
        return [l for l in self.layers if l in chosen]

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.params)):
            raise FloatingPointError("network parameters contain non-finite values")

    # -- forward / backward -------------------------------------------------

    def forward(self, X, M, actions=None, heads: Optional[Sequence[str]] = None):
        """Forward pass for a batch; returns ``(outputs, cache)``.

        ``outputs`` has ``embedding`` plus, per requested head, ``mean`` and
        ``log_std`` (policy), ``value`` or ``disc_logit``/``disc_prob``.
        """
        self.check_finite()
        lay = self.layout
        X = np.asarray(X, dtype=np.float64)
        M = np.asarray(M, dtype=bool)
        if X.ndim == 2:
            X, M = X[None], M[None]
        heads = tuple(heads) if heads is not None else lay.heads
        N, V, F = X.shape
        if F != lay.n_features:
            raise LayoutError(f"expected {lay.n_features} features, got {F}")

        Xz = np.where(M[..., None], X, 0.0)
        keys = [Xz[..., f] for f in range(F - 1, -1, -1)] + [(~M).astype(float)]
        order = np.lexsort(keys, axis=-1)
        Xs = np.take_along_axis(Xz, order[..., None], axis=1)
        Ms = np.take_along_axis(M, order, axis=1)
        m = Ms.astype(np.float64)[..., None]

        cache = {"N": N, "V": V, "m": m, "Xs": Xs, "heads": heads}
        t0 = np.tanh(Xs @ self.p("proj.W") + self.p("proj.b"))
        h = t0 * m
        cache["t0"] = t0
        H, d = lay.n_heads, lay.embed_dim
        dk = d // H
        keymask = Ms[:, None, None, :]
        # finite stand-in for -inf so all-masked samples stay NaN-free
        keybias = np.where(keymask, 0.0, MASK_BIAS)
        blocks = []
        for l in range(lay.n_layers):
            g = f"attn{l}"
            qkv = (h @ self.p(g + ".Wqkv")).reshape(N, V, 3, H, dk).transpose(2, 0, 3, 1, 4)
            Q, K, Vv = qkv[0], qkv[1], qkv[2]
            P = Q @ K.transpose(0, 1, 3, 2)
            P /= np.sqrt(dk)
            P += keybias
            P -= P.max(axis=-1, keepdims=True)
            np.exp(P, out=P)
            P *= keymask
            Z = P.sum(axis=-1, keepdims=True)
            Z[Z == 0] = 1.0
            P /= Z
            O = (P @ Vv).transpose(0, 2, 1, 3).reshape(N, V, d)
            G = np.tanh(O @ self.p(g + ".Wo") + self.p(g + ".bo"))
            blocks.append({"h": h, "Q": Q, "K": K, "Vv": Vv, "P": P, "O": O, "G": G})
            h = (h + G) * m
        cache["blocks"] = blocks
        cnt = np.maximum(m.sum(axis=1), 1.0)
        emb = (h * m).sum(axis=1) / cnt
        cache["cnt"] = cnt
        out = {"embedding": emb}

        cache["mlp"] = {}
        for head in heads:
            if head not in lay.heads:
                raise LayoutError(f"network has no {head!r} head")
            if head == "disc":
                if actions is None:
                    raise ValueError("discriminator head needs actions")
                a = np.asarray(actions, dtype=np.float64).reshape(N, lay.action_dim)
                z = np.concatenate([emb, a], axis=1)
            else:
                z = emb
            acts = [z]
            for j in range(len(lay.hidden)):
                z = np.tanh(z @ self.p(f"{head}.fc{j}.W") + self.p(f"{head}.fc{j}.b"))
                acts.append(z)
            y = z @ self.p(f"{head}.out.W") + self.p(f"{head}.out.b")
            cache["mlp"][head] = acts
            if head == "policy":
                raw = self.p("policy.log_std")
                out["mean"] = y
                out["log_std"] = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
                cache["log_std_gate"] = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
            elif head == "value":
                out["value"] = y[:, 0]
            else:
                out["disc_logit"] = y[:, 0]
                out["disc_prob"] = np.clip(sigmoid(y[:, 0]), 1e-12, 1.0 - 1e-12)
        return out, cache

    def backward(self, cache: Optional[dict], upstream: Dict[str, np.ndarray]) -> np.ndarray:
        """Gradient of ``sum(upstream[k] * outputs[k])`` w.r.t. the flat parameters.

        Accepted keys: ``mean`` (N, A), ``log_std`` (A,) or (N, A), ``value``
        (N,), ``disc_logit`` (N,), ``embedding`` (N, d).
        """
        if cache is None:
            raise ValueError("backward needs the cache returned by forward")
        lay = self.layout
        grad = np.zeros_like(self.params)

        def acc(name, g):
            q = self._index[name]
            grad[q.offset:q.offset + q.size] += g.ravel()

        N = cache["N"]
        demb = np.zeros((N, lay.embed_dim))
        if "embedding" in upstream:
            demb += upstream["embedding"]
        key_of = {"policy": "mean", "value": "value", "disc": "disc_logit"}
        for head in cache["heads"]:
            key = key_of[head]
            if head == "policy" and "log_std" in upstream:
                gl = np.asarray(upstream["log_std"], dtype=np.float64)
                if gl.ndim == 2:
                    gl = gl.sum(axis=0)
                acc("policy.log_std", gl * cache["log_std_gate"])
            if key not in upstream:
                continue
            dy = np.asarray(upstream[key], dtype=np.float64).reshape(N, -1)
            acts = cache["mlp"][head]
            acc(f"{head}.out.W", acts[-1].T @ dy)
            acc(f"{head}.out.b", dy.sum(axis=0))
            dz = dy @ self.p(f"{head}.out.W").T
            for j in range(len(lay.hidden) - 1, -1, -1):
                dpre = dz * (1.0 - acts[j + 1] ** 2)
                acc(f"{head}.fc{j}.W", acts[j].T @ dpre)
                acc(f"{head}.fc{j}.b", dpre.sum(axis=0))
                dz = dpre @ self.p(f"{head}.fc{j}.W").T
            demb += dz[:, :lay.embed_dim]

        m = cache["m"]
        V = cache["V"]
        dh = demb[:, None, :] * m / cache["cnt"][:, None, :]
        H, d = lay.n_heads, lay.embed_dim
        dk = d // H
        for l in range(lay.n_layers - 1, -1, -1):
            g = f"attn{l}"
            b = cache["blocks"][l]
            dh = dh * m
            dA = dh * (1.0 - b["G"] ** 2)
            acc(g + ".Wo", _outer(b["O"], dA))
            acc(g + ".bo", dA.sum(axis=(0, 1)))
            dO = (dA @ self.p(g + ".Wo").T).reshape(N, V, H, dk).transpose(0, 2, 1, 3)
            P = b["P"]
            dP = dO @ b["Vv"].transpose(0, 1, 3, 2)
            dVv = P.transpose(0, 1, 3, 2) @ dO
            dS = dP - (dP * P).sum(axis=-1, keepdims=True)
            dS *= P
            dS /= np.sqrt(dk)
            dqkv = np.empty((N, V, 3, H, dk))
            dqkv[:, :, 0] = (dS @ b["K"]).transpose(0, 2, 1, 3)
            dqkv[:, :, 1] = (dS.transpose(0, 1, 3, 2) @ b["Q"]).transpose(0, 2, 1, 3)
            dqkv[:, :, 2] = dVv.transpose(0, 2, 1, 3)
            dqkv = dqkv.reshape(N, V, 3 * d)
            acc(g + ".Wqkv", _outer(b["h"], dqkv))
            dh = dh + dqkv @ self.p(g + ".Wqkv").T
        dpre = dh * m * (1.0 - cache["t0"] ** 2)
        acc("proj.W", _outer(cache["Xs"], dpre))
        acc("proj.b", dpre.sum(axis=(0, 1)))
        return grad


def _outer(a, b):
    """``sum_{n,v} a[n,v,:]^T b[n,v,:]`` as a single matrix product."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_network(layout: Layout = Layout(), seed: int = 0) -> Network:
    """Deterministic uniform fan-in initialisation; each layer draws from its own stream."""
    layout.validate()
    table, layers = _param_table(layout)
    params = np.zeros(sum(p.size for p in table))
    for i, layer in enumerate(layers):
        _init_layer(layout, table, layer, i, seed, params)
    return Network(layout, params, {"init": int(seed), "resets": []})


def reset_last_layers(net: Network, k: int, seed: int) -> Network:
    """Copy of ``net`` with the final ``k`` layers of every head re-drawn from ``seed``."""
    chosen = net.last_layers(k)
    params = net.params.copy()
    for layer in chosen:
        _init_layer(net.layout, net.table, layer, net.layers.index(layer), seed, params)
    seeds = dict(net.seeds)
    if chosen:
        seeds["resets"] = list(seeds.get("resets", [])) + [int(seed)]
    return Network(net.layout, params, seeds)


# -- functional shorthands --------------------------------------------------

@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian over pre-squash actions.

    Actions are ``bounds * tanh(u)`` with ``u ~ N(mean, exp(log_std)^2)``.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def sample(self, rng: np.random.Generator, bounds) -> Tuple[np.ndarray, np.ndarray]:
        u = self.mean + np.exp(self.log_std) * rng.standard_normal(np.shape(self.mean))
        return u, squash(u, bounds)

    def log_prob(self, u, bounds=None) -> np.ndarray:
        lp = gaussian_log_prob(u, self.mean, self.log_std)
        if bounds is not None:
            lp = lp - squash_log_det(u, bounds)
        return lp


def squash(u, bounds) -> np.ndarray:
    return np.asarray(bounds) * np.tanh(u)


def unsquash(a, bounds) -> np.ndarray:
    r = np.clip(np.asarray(a) / np.asarray(bounds), -1 + 1e-12, 1 - 1e-12)
    return np.arctanh(r)


def squash_log_det(u, bounds) -> np.ndarray:
    """``sum log |d squash / du|`` over the last axis."""
    u = np.asarray(u)
    # log(1 - tanh^2 u) computed stably
    log1m = 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return (np.log(np.asarray(bounds)) + log1m).sum(axis=-1)


def gaussian_log_prob(u, mean, log_std) -> np.ndarray:
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi)).sum(axis=-1)


def _fm_arrays(fm):
    return np.asarray(fm.rows)[None], np.asarray(fm.mask)[None]


def set_encode(net: Network, fm) -> np.ndarray:
    out, _ = net.forward(*_fm_arrays(fm), heads=())
    return out["embedding"][0]


def forward_policy(net: Network, fm) -> ActionDistribution:
    out, _ = net.forward(*_fm_arrays(fm), heads=("policy",))
    return ActionDistribution(out["mean"][0], out["log_std"])


def forward_value(net: Network, fm) -> float:
    out, _ = net.forward(*_fm_arrays(fm), heads=("value",))
    return float(out["value"][0])


def forward_disc(net: Network, fm, action) -> float:
    out, _ = net.forward(*_fm_arrays(fm), actions=np.asarray(action, float)[None], heads=("disc",))
    return float(out["disc_prob"][0])


def backprop(net: Network, cache: Optional[dict], upstream: Dict[str, np.ndarray]) -> np.ndarray:
    return net.backward(cache, upstream)


# -- optimisation -----------------------------------------------------------

class Adam:
    """Adam over a flat parameter vector, updating it in place."""

    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        delta = -self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params += delta
        return delta

    def zero_slice(self, sl: slice) -> None:
        self.m[sl] = 0.0
        self.v[sl] = 0.0

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / (norm + 1e-12))
    return grad, norm


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, nets: Dict[str, Network], extra: Optional[dict] = None) -> None:
    """Write a byte-stable checkpoint: magic, JSON header, raw little-endian params."""
    header = {"format": "lcgen-checkpoint", "version": CHECKPOINT_VERSION, "networks": [], "extra": extra or {}}
    blobs = []
    for name in sorted(nets):
        net = nets[name]
        blob = net.params.astype("<f8").tobytes()
        header["networks"].append({
            "name": name, "layout": net.layout.to_dict(), "seeds": net.seeds,
            "n_params": net.n_params, "sha256": hashlib.sha256(blob).hexdigest(),
        })
        blobs.append(blob)
    head = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Tuple[Dict[str, Network], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (n,) = struct.unpack("<Q", data[pos:pos + 8])
        header = json.loads(data[pos + 8:pos + 8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    pos += 8 + n
    nets = {}
    for entry in header["networks"]:
        size = 8 * entry["n_params"]
        blob = data[pos:pos + size]
        pos += size
        if len(blob) != size or hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: parameter block {entry['name']!r} is corrupted")
        try:
            layout = Layout.from_dict(entry["layout"])
            nets[entry["name"]] = Network(layout, np.frombuffer(blob, dtype="<f8").astype(np.float64),
                                          entry["seeds"])
        except (LayoutError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad layout ({exc})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return nets, header.get("extra", {})
