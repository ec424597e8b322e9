"""Kinematic replay simulator with one policy-controlled adversary.

The ego and background vehicles replay their logged motion. The adversary
follows a kinematic bicycle model driven by (acceleration, steering) actions.
:class:`BatchEnv` runs many scenario replays in lockstep for rollout
collection; the single-environment functions share its feature and collision
kernels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import boxes_overlap
from .ingest import UNKNOWN_LANE, LaneMap, wrap_angle
from .mining import ROLES, Scenario

ACCEL_MAX = 5.0
STEER_MAX = math.pi / 4
ACTION_BOUNDS = np.array([ACCEL_MAX, STEER_MAX])
WHEELBASE_RATIO = 0.6
N_FEATURES = 9
FEATURE_NAMES = ("presence", "x_rel", "y_rel", "vx_rel", "vy_rel", "cos_rel", "sin_rel", "priority", "distance")
# network input scaling; positions in tens of meters, speeds in m/s
FEATURE_SCALE = np.array([1.0, 50.0, 10.0, 10.0, 5.0, 1.0, 1.0, 1.0, 50.0])


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class Action:
    accel: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "accel", float(np.clip(self.accel, -ACCEL_MAX, ACCEL_MAX)))
        object.__setattr__(self, "steer", float(np.clip(self.steer, -STEER_MAX, STEER_MAX)))


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    speed: float
    heading: float
    length: float = 5.0
    width: float = 2.0
    lane_index: int = UNKNOWN_LANE
    priority: int = 0
    vehicle_id: str = ""


def kinematic_step(x, y, speed, heading, length, accel, steer, dt):
    """Array form of the bicycle update; returns (x, y, speed, heading)."""
    accel = np.clip(accel, -ACCEL_MAX, ACCEL_MAX)
    steer = np.clip(steer, -STEER_MAX, STEER_MAX)
    heading_n = wrap_angle(heading + speed / (WHEELBASE_RATIO * length) * np.tan(steer) * dt)
    speed_n = np.maximum(0.0, speed + accel * dt)
    return x + speed_n * np.cos(heading_n) * dt, y + speed_n * np.sin(heading_n) * dt, speed_n, heading_n


def kinematic_update(v: VehicleState, a: Action, dt: float) -> VehicleState:
    """Advance one step: heading from the old speed, position along the new heading."""
    heading = wrap_angle(v.heading + v.speed / (WHEELBASE_RATIO * v.length) * math.tan(a.steer) * dt)
    speed = max(0.0, v.speed + a.accel * dt)
    return replace(v, x=v.x + speed * math.cos(heading) * dt, y=v.y + speed * math.sin(heading) * dt,
                   speed=speed, heading=heading)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Per-vehicle features in the adversary's frame, nearest first.

    Columns follow :data:`FEATURE_NAMES`; padded rows are all zero with
    ``mask`` False.
    """

    rows: np.ndarray
    mask: np.ndarray

    @property
    def n_vehicles(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def empty(cls, n_vehicles: int = 8) -> "FeatureMatrix":
        return cls(np.zeros((n_vehicles, N_FEATURES)), np.zeros(n_vehicles, bool))


def encode_relative(ax, ay, ah, aspeed, ox, oy, oh, ospeed, oprio, present, n_vehicles: int):
    """Batched feature encoding.

    Adversary arrays have shape ``(N,)``, others ``(N, K)``. Returns rows
    ``(N, V, 9)`` and mask ``(N, V)``.
    """
    ax, ay, ah, aspeed = (np.asarray(v, float)[:, None] for v in (ax, ay, ah, aspeed))
    c, s = np.cos(ah), np.sin(ah)
    dx, dy = ox - ax, oy - ay
    xr = c * dx + s * dy
    yr = -s * dx + c * dy
    dvx = ospeed * np.cos(oh) - aspeed * c
    dvy = ospeed * np.sin(oh) - aspeed * s
    vxr = c * dvx + s * dvy
    vyr = -s * dvx + c * dvy
    dh = oh - ah
    dist = np.hypot(xr, yr)
    feats = np.stack([np.ones_like(xr), xr, yr, vxr, vyr, np.cos(dh), np.sin(dh), oprio, dist], axis=-1)
    n, k = xr.shape
    order = np.argsort(np.where(present, dist, np.inf), axis=1, kind="stable")[:, :n_vehicles]
    feats = np.take_along_axis(feats, order[..., None], axis=1)
    keep = np.take_along_axis(present, order, axis=1)
    rows = np.zeros((n, n_vehicles, N_FEATURES))
    mask = np.zeros((n, n_vehicles), dtype=bool)
    m = min(k, n_vehicles)
    rows[:, :m] = np.where(keep[..., None], feats, 0.0)
    mask[:, :m] = keep
    return rows, mask


def scale_features(rows) -> np.ndarray:
    """Bring features to order-one magnitudes for the networks; masked rows stay zero."""
    return np.asarray(rows, dtype=float) / FEATURE_SCALE


@dataclass(frozen=True)
class CollisionReport:
    adv_hit_ego: bool = False
    adv_hit_background: bool = False
    pairs: Tuple[Tuple[str, str], ...] = ()


@dataclass(frozen=True)
class EnvConfig:
    n_vehicles: int = 8
    adversary_role: Optional[str] = None
    adversary_replay: bool = False
    lane_map: Optional[LaneMap] = None


def select_adversary(s: Scenario, preferred: Optional[str] = None) -> str:
    """Target-lane neighbors first, each group in LF, LB, RF, RB order."""
    if not s.neighbors:
        raise EnvError(f"scenario {s.scenario_id} has no neighbor to control")
    if preferred is not None:
        if preferred not in s.neighbors:
            raise EnvError(f"scenario {s.scenario_id} has no {preferred} neighbor")
        return preferred
    target = s.event.target_roles()
    order = [r for r in ROLES if r in target] + [r for r in ROLES if r not in target]
    return next(r for r in order if r in s.neighbors)


@dataclass(frozen=True, eq=False)
class _Replay:
    """Scenario preprocessed into arrays; ``others[0]`` is the ego."""

    scenario: Scenario
    role: str
    ids: Tuple[str, ...]
    roles: Tuple[str, ...]
    pos: np.ndarray   # (K, T, 4): x, y, speed, heading
    size: np.ndarray  # (K, 2)
    prio: np.ndarray  # (K, T)
    lanes: np.ndarray  # (K, T)
    adv_log: np.ndarray  # (T, 4)
    adv_size: np.ndarray  # (2,)
    adv_id: str

    @property
    def horizon(self) -> int:
        return self.pos.shape[1] - 1


def _prepare_replay(s: Scenario, cfg: EnvConfig) -> _Replay:
    role = select_adversary(s, cfg.adversary_role)
    vehicles = [("ego", s.ego)] + [(r, t) for r, t in s.neighbors.items() if r != role]
    adv = s.neighbors[role]

    def log(tr):
        return np.stack([tr.x, tr.y, tr.speed, tr.heading], axis=-1)

    lm = cfg.lane_map
    lanes = np.stack([tr.lane for _, tr in vehicles])
    if lm is not None:
        prio = np.vectorize(lm.priority, otypes=[float])(lanes)
    else:
        prio = np.zeros(lanes.shape)
    return _Replay(
        scenario=s, role=role,
        ids=tuple(tr.vehicle_id for _, tr in vehicles),
        roles=tuple(r for r, _ in vehicles),
        pos=np.stack([log(tr) for _, tr in vehicles]),
        size=np.array([[tr.length, tr.width] for _, tr in vehicles]),
        prio=prio, lanes=lanes,
        adv_log=log(adv), adv_size=np.array([adv.length, adv.width]), adv_id=adv.vehicle_id,
    )


@dataclass(frozen=True, eq=False)
class EnvState:
    step_index: int
    dt: float
    ego: VehicleState
    adversary: VehicleState
    background: Tuple[VehicleState, ...]
    scenario: Scenario
    initial_distance: float
    terminal: bool = False
    config: EnvConfig = EnvConfig()
    replay: _Replay = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def horizon(self) -> int:
        return self.replay.horizon

    @property
    def adversary_role(self) -> str:
        return self.replay.role


@dataclass(frozen=True, eq=False)
class StepInfo:
    collision: CollisionReport
    done: bool
    adversary_speed: float
    distance: float
    initial_distance: float


def _logged_state(rp: _Replay, k: int, i: int) -> VehicleState:
    x, y, v, h = rp.pos[i, k]
    return VehicleState(float(x), float(y), float(v), float(h), float(rp.size[i, 0]), float(rp.size[i, 1]),
                        int(rp.lanes[i, k]), int(rp.prio[i, k]), rp.ids[i])


def _adv_lane(cfg: EnvConfig, rp: _Replay, x, y, k):
    if cfg.lane_map is None:
        lane = int(rp.scenario.neighbors[rp.role].lane[min(k, rp.horizon)])
        return lane, 0
    from .ingest import match_lane
    lane = match_lane(cfg.lane_map, (x, y))
    lane = UNKNOWN_LANE if lane is None else lane
    return lane, cfg.lane_map.priority(lane)


def reset_from_scenario(s: Scenario, cfg: EnvConfig = EnvConfig()) -> Tuple[EnvState, FeatureMatrix]:
    rp = _prepare_replay(s, cfg)
    x, y, v, h = (float(c) for c in rp.adv_log[0])
    lane, prio = _adv_lane(cfg, rp, x, y, 0)
    adversary = VehicleState(x, y, v, h, float(rp.adv_size[0]), float(rp.adv_size[1]), lane, prio, rp.adv_id)
    ego = _logged_state(rp, 0, 0)
    d0 = math.hypot(ego.x - adversary.x, ego.y - adversary.y)
    if not d0 > 0:
        raise EnvError(f"scenario {s.scenario_id}: adversary starts on top of the ego")
    state = EnvState(0, s.dt, ego, adversary, tuple(_logged_state(rp, 0, i) for i in range(1, len(rp.ids))),
                     s, d0, False, cfg, rp)
    return state, encode_features(state)


def _others(state: EnvState) -> List[VehicleState]:
    return [state.ego, *state.background]


def check_collisions(state: EnvState) -> CollisionReport:
    a = state.adversary
    others = _others(state)
    arr = np.array([[o.x, o.y, o.heading, o.length, o.width] for o in others])
    hit = boxes_overlap(a.x, a.y, a.heading, a.length, a.width, *arr.T)
    pairs = tuple((a.vehicle_id, o.vehicle_id) for o, h in zip(others, hit) if h)
    return CollisionReport(bool(hit[0]), bool(hit[1:].any()), pairs)


def encode_features(state: EnvState) -> FeatureMatrix:
    a = state.adversary
    others = _others(state)
    arr = np.array([[o.x, o.y, o.heading, o.speed, o.priority] for o in others])[None]
    rows, mask = encode_relative(
        [a.x], [a.y], [a.heading], [a.speed], arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3],
        arr[..., 4], np.ones(arr.shape[:2], bool), state.config.n_vehicles,
    )
    return FeatureMatrix(rows[0], mask[0])


def step(state: EnvState, action: Action) -> Tuple[EnvState, FeatureMatrix, StepInfo]:
    if state.terminal:
        raise EnvError("cannot step a terminal state; reset first")
    rp, k = state.replay, state.step_index + 1
    if state.config.adversary_replay:
        x, y, v, h = (float(c) for c in rp.adv_log[k])
        adv = replace(state.adversary, x=x, y=y, speed=v, heading=h)
    else:
        adv = kinematic_update(state.adversary, action, state.dt)
    lane, prio = _adv_lane(state.config, rp, adv.x, adv.y, k)
    adv = replace(adv, lane_index=lane, priority=prio)
    ego = _logged_state(rp, k, 0)
    background = tuple(_logged_state(rp, k, i) for i in range(1, len(rp.ids)))
    nxt = replace(state, step_index=k, ego=ego, adversary=adv, background=background)
    rep = check_collisions(nxt)
    done = rep.adv_hit_ego or rep.adv_hit_background or k >= rp.horizon
    nxt = replace(nxt, terminal=done)
    info = StepInfo(rep, done, adv.speed, math.hypot(ego.x - adv.x, ego.y - adv.y), state.initial_distance)
    return nxt, encode_features(nxt), info


class BatchEnv:
    """Lockstep replays of ``n_envs`` scenarios drawn from a catalog.

    Finished slots must be refilled with :meth:`reset_done` before the next
    :meth:`step`.
    """

    def __init__(self, catalog: Sequence[Scenario], n_envs: int, cfg: EnvConfig = EnvConfig(),
                 rng: Optional[np.random.Generator] = None):
        if not catalog:
            raise EnvError("empty catalog")
        self.cfg = cfg
        self.n = n_envs
        self.rng = rng if rng is not None else np.random.default_rng(0)
        reps = [_prepare_replay(s, cfg) for s in catalog]
        dts = {s.dt for s in catalog}
        if len(dts) != 1:
            raise EnvError("all scenarios must share one dt")
        self.dt = dts.pop()
        n_s = len(reps)
        k_max = max(len(r.ids) for r in reps)
        t_max = max(r.pos.shape[1] for r in reps)
        self.pos = np.zeros((n_s, k_max, t_max, 4))
        self.size = np.ones((n_s, k_max, 2))
        self.prio = np.zeros((n_s, k_max, t_max))
        self.present = np.zeros((n_s, k_max), bool)
        self.adv_log = np.zeros((n_s, t_max, 4))
        self.adv_size = np.zeros((n_s, 2))
        self.horizon = np.zeros(n_s, dtype=np.int64)
        for i, r in enumerate(reps):
            k, t = r.pos.shape[:2]
            self.pos[i, :k, :t] = r.pos
            self.size[i, :k] = r.size
            self.prio[i, :k, :t] = r.prio
            self.present[i, :k] = True
            self.adv_log[i, :t] = r.adv_log
            self.adv_size[i] = r.adv_size
            self.horizon[i] = r.horizon
        self.scen = np.zeros(n_envs, dtype=np.int64)
        self.t = np.zeros(n_envs, dtype=np.int64)
        self.adv = np.zeros((n_envs, 4))
        self.d0 = np.ones(n_envs)
        self.done = np.ones(n_envs, bool)
        self.reset_done()

    def reset_done(self) -> np.ndarray:
        """Start new episodes in finished slots; returns the refilled slot mask."""
        idx = np.flatnonzero(self.done)
        if len(idx):
            self.scen[idx] = self.rng.integers(0, len(self.horizon), len(idx))
            self.t[idx] = 0
            self.adv[idx] = self.adv_log[self.scen[idx], 0]
            ego = self.pos[self.scen[idx], 0, 0]
            self.d0[idx] = np.hypot(ego[:, 0] - self.adv[idx, 0], ego[:, 1] - self.adv[idx, 1])
            if np.any(self.d0[idx] <= 0):
                raise EnvError("adversary starts on top of the ego")
        refilled = self.done.copy()
        self.done[:] = False
        return refilled

    def _others(self):
        ar = np.arange(self.n)
        return self.pos[self.scen[:, None], np.arange(self.pos.shape[1])[None], self.t[:, None]], ar

    def observe(self) -> Tuple[np.ndarray, np.ndarray]:
        o, _ = self._others()
        prio = self.prio[self.scen[:, None], np.arange(self.pos.shape[1])[None], self.t[:, None]]
        a = self.adv
        return encode_relative(a[:, 0], a[:, 1], a[:, 3], a[:, 2], o[..., 0], o[..., 1], o[..., 3], o[..., 2],
                               prio, self.present[self.scen], self.cfg.n_vehicles)

    def step(self, accel: np.ndarray, steer: np.ndarray) -> Dict[str, np.ndarray]:
        if self.done.any():
            raise EnvError("reset finished slots before stepping")
        sz = self.adv_size[self.scen]
        self.t += 1
        if self.cfg.adversary_replay:
            self.adv = self.adv_log[self.scen, self.t].copy()
        else:
            x, y, v, h = kinematic_step(self.adv[:, 0], self.adv[:, 1], self.adv[:, 2], self.adv[:, 3],
                                        sz[:, 0], accel, steer, self.dt)
            self.adv = np.stack([x, y, v, h], axis=-1)
        o, _ = self._others()
        osz = self.size[self.scen]
        a = self.adv
        hit = boxes_overlap(a[:, 0:1], a[:, 1:2], a[:, 3:4], sz[:, 0:1], sz[:, 1:2],
                            o[..., 0], o[..., 1], o[..., 3], osz[..., 0], osz[..., 1])
        hit &= self.present[self.scen]
        hit_ego = hit[:, 0]
        hit_bg = hit[:, 1:].any(axis=1)
        self.done = hit_ego | hit_bg | (self.t >= self.horizon[self.scen])
        return {
            "adv_hit_ego": hit_ego,
            "adv_hit_background": hit_bg & ~hit_ego,
            "done": self.done.copy(),
            "adversary_speed": a[:, 2].copy(),
            "distance": np.hypot(o[:, 0, 0] - a[:, 0], o[:, 0, 1] - a[:, 1]),
            "initial_distance": self.d0.copy(),
        }


TRACE_COLUMNS = ("step", "vehicle_id", "role", "x", "y", "speed", "heading", "adv_hit_ego", "adv_hit_background")


@dataclass
class EpisodeTrace:
    """Per-step vehicle states plus optional per-step reward columns."""

    scenario_id: str
    rows: List[dict] = field(default_factory=list)
    rewards: List[dict] = field(default_factory=list)

    def record(self, state: EnvState, rep: CollisionReport = CollisionReport()) -> None:
        roles = ("ego",) + tuple("background:" + r for r in state.replay.roles[1:])
        for role, v in zip(("adversary",) + roles, (state.adversary, *_others(state))):
            self.rows.append({
                "step": state.step_index, "vehicle_id": v.vehicle_id, "role": role, "x": v.x, "y": v.y,
                "speed": v.speed, "heading": v.heading,
                "adv_hit_ego": int(rep.adv_hit_ego), "adv_hit_background": int(rep.adv_hit_background),
            })

    def series(self, role: str = "adversary") -> Dict[str, np.ndarray]:
        rows = [r for r in self.rows if r["role"] == role]
        return {k: np.array([r[k] for r in rows], dtype=float) for k in ("step", "x", "y", "speed", "heading")}

    @property
    def collided_with_ego(self) -> bool:
        return any(r["adv_hit_ego"] for r in self.rows)

    def write_csv(self, path) -> None:
        reward_cols = [c for c in self.rewards[0] if c != "step"] if self.rewards else []
        by_step = {r["step"]: r for r in self.rewards}
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(TRACE_COLUMNS) + reward_cols)
            for r in self.rows:
                rew = by_step.get(r["step"], {})
                w.writerow([_fmt(r[c]) for c in TRACE_COLUMNS] + [_fmt(rew.get(c, "")) for c in reward_cols])

    @classmethod
    def read_csv(cls, path) -> "EpisodeTrace":
        tr = cls(Path(path).stem)
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(TRACE_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing trace columns {sorted(missing)}")
            extra = [c for c in reader.fieldnames if c not in TRACE_COLUMNS]
            seen = set()
            for row in reader:
                step_i = int(row["step"])
                tr.rows.append({
                    "step": step_i, "vehicle_id": row["vehicle_id"], "role": row["role"],
                    "x": float(row["x"]), "y": float(row["y"]), "speed": float(row["speed"]),
                    "heading": float(row["heading"]), "adv_hit_ego": int(row["adv_hit_ego"]),
                    "adv_hit_background": int(row["adv_hit_background"]),
                })
                if extra and step_i not in seen and row[extra[0]] != "":
                    seen.add(step_i)
                    tr.rewards.append({"step": step_i, **{c: float(row[c]) for c in extra if c != "step"}})
        return tr


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
