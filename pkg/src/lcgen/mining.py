"""Lane-change scenario extraction.

Pipeline per trajectory: resample, match positions to lanes, flag frames where
the lane index steps to an adjacent lane, pick the nearest front/rear vehicles
in the old and new lanes, then window and clean the extract.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .ingest import (
    DEFAULT_DT, UNKNOWN_LANE, GapError, LaneMap, Trajectory, assign_lanes, match_lanes, resample,
)

ROLES = ("LF", "LB", "RF", "RB")
CATALOG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LaneChangeEvent:
    vehicle_id: str
    change_frame: int
    prev_lane: int
    new_lane: int

    @property
    def moves_left(self) -> bool:
        # lower lane ids lie to the left
        return self.new_lane < self.prev_lane

    def target_roles(self) -> Tuple[str, str]:
        return ("LF", "LB") if self.moves_left else ("RF", "RB")


@dataclass(frozen=True)
class NeighborSet:
    lf: Optional[str] = None
    lb: Optional[str] = None
    rf: Optional[str] = None
    rb: Optional[str] = None

    def as_dict(self) -> Dict[str, str]:
        """Present roles only, in LF, LB, RF, RB order."""
        return {r: v for r, v in zip(ROLES, (self.lf, self.lb, self.rf, self.rb)) if v is not None}


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    ego: Trajectory
    neighbors: Dict[str, Trajectory]
    event: LaneChangeEvent
    window: Tuple[float, float]
    source: str = "corpus"
    dt: float = DEFAULT_DT

    @property
    def n_steps(self) -> int:
        return len(self.ego.t)

    def to_dict(self) -> dict:
        ev = self.event
        return {
            "schema_version": CATALOG_SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "source": self.source,
            "dt": self.dt,
            "window": [float(self.window[0]), float(self.window[1])],
            "event": {
                "vehicle_id": ev.vehicle_id, "change_frame": ev.change_frame,
                "prev_lane": ev.prev_lane, "new_lane": ev.new_lane,
            },
            "ego": self.ego.to_dict(),
            "neighbors": {r: self.neighbors[r].to_dict() for r in ROLES if r in self.neighbors},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema_version") != CATALOG_SCHEMA_VERSION:
            raise ValueError(f"unsupported catalog schema_version {d.get('schema_version')!r}")
        return cls(
            scenario_id=d["scenario_id"],
            ego=Trajectory.from_dict(d["ego"]),
            neighbors={r: Trajectory.from_dict(t) for r, t in d["neighbors"].items()},
            event=LaneChangeEvent(**d["event"]),
            window=tuple(d["window"]),
            source=d["source"],
            dt=d["dt"],
        )


@dataclass(frozen=True)
class Rejection:
    reason: str  # coverage | gap | outlier | multiple
    detail: str = ""


@dataclass
class MiningStats:
    candidates: int = 0
    accepted: int = 0
    per_role: Dict[str, int] = field(default_factory=lambda: {r: 0 for r in ROLES})
    rejections: Dict[str, int] = field(default_factory=dict)

    @property
    def conversion_rate(self) -> float:
        return self.accepted / self.candidates if self.candidates else 0.0

    def to_dict(self) -> dict:
        return {
            "candidates": self.candidates,
            "accepted": self.accepted,
            "conversion_rate": self.conversion_rate,
            "per_role": dict(self.per_role),
            "rejections": dict(sorted(self.rejections.items())),
        }

    def table(self) -> str:
        lines = [
            f"{'candidates':<16}{self.candidates:>8d}",
            f"{'accepted':<16}{self.accepted:>8d}",
            f"{'conversion rate':<16}{self.conversion_rate:>8.3f}",
        ]
        peak = max(self.per_role.values()) or 1
        for r in ROLES:
            n = self.per_role[r]
            lines.append(f"{r:<16}{n:>8d}  " + "#" * int(round(30 * n / peak)))
        for reason, n in sorted(self.rejections.items()):
            lines.append(f"{'rejected:' + reason:<16}{n:>8d}")
        return "\n".join(lines)


@dataclass(frozen=True)
class MiningConfig:
    dt: float = DEFAULT_DT
    half_window: float = 2.0
    debounce: float = 1.0
    max_speed: float = 60.0
    max_step: float = 6.0  # meters per 0.1 s, scaled with dt
    min_neighbors: int = 1
    source: str = "corpus"
    workers: int = 1


def detect_lane_changes(tr: Trajectory, lane_map: LaneMap, debounce: float = 1.0) -> List[LaneChangeEvent]:
    lanes = match_lanes(lane_map, tr.x, tr.y)
    events: List[LaneChangeEvent] = []
    prev = UNKNOWN_LANE
    last_time = -math.inf
    for i, lane in enumerate(lanes.tolist()):
        if lane == UNKNOWN_LANE:
            continue
        if prev != UNKNOWN_LANE and lane != prev:
            if lane_map.adjacent(prev, lane) and tr.t[i] - last_time >= debounce - 1e-9:
                events.append(LaneChangeEvent(tr.vehicle_id, i, prev, lane))
                last_time = tr.t[i]
        prev = lane
    return events


def _sample_at(tr: Trajectory, time: float, dt: float) -> Optional[int]:
    i = int(np.searchsorted(tr.t, time - 0.5 * dt))
    if i < len(tr.t) and abs(tr.t[i] - time) < 0.5 * dt:
        return i
    return None


def find_neighbors(event: LaneChangeEvent, corpus: Union[Mapping[str, Trajectory], Iterable[Trajectory]],
                   lane_map: LaneMap, dt: float = DEFAULT_DT) -> NeighborSet:
    """Nearest front and rear vehicle in the old and new lane at the change frame."""
    trajs = list(corpus.values()) if isinstance(corpus, Mapping) else list(corpus)
    ego = next((t for t in trajs if t.vehicle_id == event.vehicle_id), None)
    if ego is None:
        return NeighborSet()
    tc = ego.t[event.change_frame]
    ex = ego.x[event.change_frame]
    cand = []
    for tr in trajs:
        if tr.vehicle_id == ego.vehicle_id:
            continue
        i = _sample_at(tr, tc, dt)
        if i is None:
            continue
        cand.append((tr.vehicle_id, tr.x[i], tr.y[i]))
    if not cand:
        return NeighborSet()
    lanes = match_lanes(lane_map, [c[1] for c in cand], [c[2] for c in cand])
    best: Dict[Tuple[int, bool], Tuple[float, str]] = {}
    for (vid, x, _), lane in zip(cand, lanes.tolist()):
        if lane not in (event.prev_lane, event.new_lane):
            continue
        dx = x - ex
        key = (lane, dx > 0)
        score = (abs(dx), vid)
        if key not in best or score < best[key]:
            best[key] = score
    new_side, old_side = ("L", "R") if event.moves_left else ("R", "L")
    slots = {}
    for (lane, ahead), (_, vid) in best.items():
        side = new_side if lane == event.new_lane else old_side
        slots[side + ("F" if ahead else "B")] = vid
    return NeighborSet(slots.get("LF"), slots.get("LB"), slots.get("RF"), slots.get("RB"))


def _window_slice(tr: Trajectory, w0: float, w1: float, dt: float) -> Optional[Trajectory]:
    if tr.t[0] > w0 + 1e-6 or tr.t[-1] < w1 - 1e-6:
        return None
    i0 = int(np.searchsorted(tr.t, w0 - 0.5 * dt))
    i1 = int(np.searchsorted(tr.t, w1 + 0.5 * dt))
    return tr.slice(i0, i1)


def _quality(tr: Trajectory, w0: float, w1: float, cfg: MiningConfig) -> Optional[Rejection]:
    for g0, g1 in tr.gaps:
        if g1 > w0 and g0 < w1:
            return Rejection("gap", f"vehicle {tr.vehicle_id}: {g1 - g0:.2f} s gap")
    step = np.hypot(np.diff(tr.x), np.diff(tr.y))
    if np.any(tr.speed >= cfg.max_speed):
        return Rejection("outlier", f"vehicle {tr.vehicle_id}: speed {tr.speed.max():.1f} m/s")
    if np.any(step >= cfg.max_step * cfg.dt / 0.1):
        return Rejection("outlier", f"vehicle {tr.vehicle_id}: jump of {step.max():.1f} m")
    return None


def _count_changes(lanes: np.ndarray, t: np.ndarray, lane_map: LaneMap, debounce: float) -> int:
    n, prev, last = 0, UNKNOWN_LANE, -math.inf
    for i, lane in enumerate(lanes.tolist()):
        if lane == UNKNOWN_LANE:
            continue
        if prev != UNKNOWN_LANE and lane != prev and lane_map.adjacent(prev, lane):
            if t[i] - last >= debounce - 1e-9:
                n += 1
                last = t[i]
        prev = lane
    return n


def clean_and_window(event: LaneChangeEvent, ego: Trajectory, neighbors: Mapping[str, Trajectory],
                     cfg: MiningConfig = MiningConfig(), lane_map: Optional[LaneMap] = None
                     ) -> Union[Scenario, Rejection]:
    """Cut a window around the change frame; return a Scenario or a Rejection.

    The window is clipped to the ego's data. Neighbors that do not cover the
    window or fail the quality checks are dropped; the scenario is rejected if
    the ego fails a check or fewer than ``min_neighbors`` remain.
    """
    tc = ego.t[event.change_frame]
    w0 = max(tc - cfg.half_window, ego.t[0])
    w1 = min(tc + cfg.half_window, ego.t[-1])
    ego_w = _window_slice(ego, w0, w1, cfg.dt)
    bad = _quality(ego_w, w0, w1, cfg)
    if bad is not None:
        return bad
    if lane_map is not None and _count_changes(ego_w.lane, ego_w.t, lane_map, cfg.debounce) > 1:
        return Rejection("multiple", f"vehicle {ego.vehicle_id}: more than one lane change in window")
    kept: Dict[str, Trajectory] = {}
    first_problem: Optional[Rejection] = None
    for role in ROLES:
        if role not in neighbors:
            continue
        nb = _window_slice(neighbors[role], w0, w1, cfg.dt)
        problem = (Rejection("coverage", f"{role} does not cover the window") if nb is None
                   else _quality(nb, w0, w1, cfg))
        if problem is None:
            kept[role] = nb
        elif first_problem is None:
            first_problem = problem
    if len(kept) < cfg.min_neighbors:
        return first_problem or Rejection("coverage", "no neighbor vehicles")
    i0 = int(np.searchsorted(ego.t, w0 - 0.5 * cfg.dt))
    ev = LaneChangeEvent(event.vehicle_id, event.change_frame - i0, event.prev_lane, event.new_lane)
    ego_key = str(event.vehicle_id)
    return Scenario(
        scenario_id=f"{cfg.source}-{ego_key}-{event.change_frame}",
        ego=ego_w, neighbors=kept, event=ev, window=(float(ego_w.t[0]), float(ego_w.t[-1])),
        source=cfg.source, dt=cfg.dt,
    )


def validate_scenario(s: Scenario, lane_map: Optional[LaneMap] = None, debounce: float = 1.0) -> None:
    """Raise ``ValueError`` if a scenario breaks its invariants."""
    trajs = [s.ego, *s.neighbors.values()]
    for tr in trajs:
        if len(tr.t) != len(s.ego.t) or np.any(np.abs(tr.t - s.ego.t) > 1e-9):
            raise ValueError(f"{s.scenario_id}: vehicle {tr.vehicle_id} not on the common time grid")
        if np.any(np.abs(np.diff(tr.t) - s.dt) > 1e-9):
            raise ValueError(f"{s.scenario_id}: non-uniform timestep")
    if abs(s.ego.t[0] - s.window[0]) > 1e-9 or abs(s.ego.t[-1] - s.window[1]) > 1e-9:
        raise ValueError(f"{s.scenario_id}: window does not match samples")
    if not s.neighbors:
        raise ValueError(f"{s.scenario_id}: no neighbors")
    ids = [tr.vehicle_id for tr in trajs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{s.scenario_id}: duplicate vehicle ids")
    ev = s.event
    if ev.prev_lane == ev.new_lane:
        raise ValueError(f"{s.scenario_id}: degenerate event")
    if lane_map is not None:
        if not lane_map.adjacent(ev.prev_lane, ev.new_lane):
            raise ValueError(f"{s.scenario_id}: lanes not adjacent")
        lanes = match_lanes(lane_map, s.ego.x, s.ego.y)
        if _count_changes(lanes, s.ego.t, lane_map, debounce) != 1:
            raise ValueError(f"{s.scenario_id}: ego must change lanes exactly once")


def _vehicle_key(vid: str):
    return (0, int(vid), "") if vid.isdigit() else (1, 0, vid)


def _prepare(tr: Trajectory, lane_map: LaneMap, dt: float) -> Optional[Trajectory]:
    try:
        return assign_lanes(resample(tr, dt, max_gap=None), lane_map)
    except (GapError, ValueError):
        return None


def mine_corpus(corpus: Union[Mapping[str, Trajectory], Iterable[Trajectory]], lane_map: LaneMap,
                cfg: MiningConfig = MiningConfig()) -> Tuple[List[Scenario], MiningStats]:
    trajs = list(corpus.values()) if isinstance(corpus, Mapping) else list(corpus)
    if not trajs:
        raise ValueError("corpus is empty")
    trajs.sort(key=lambda t: _vehicle_key(t.vehicle_id))
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            prepared = list(pool.map(lambda t: _prepare(t, lane_map, cfg.dt), trajs))
    else:
        prepared = [_prepare(t, lane_map, cfg.dt) for t in trajs]
    ready = [p for p in prepared if p is not None]
    by_id = {t.vehicle_id: t for t in ready}

    stats = MiningStats()
    catalog: List[Scenario] = []
    for tr in ready:
        for ev in detect_lane_changes(tr, lane_map, cfg.debounce):
            stats.candidates += 1
            nbs = find_neighbors(ev, ready, lane_map, cfg.dt).as_dict()
            result = clean_and_window(ev, tr, {r: by_id[v] for r, v in nbs.items()}, cfg, lane_map)
            if isinstance(result, Rejection):
                stats.rejections[result.reason] = stats.rejections.get(result.reason, 0) + 1
                continue
            catalog.append(result)
            stats.accepted += 1
            for r in result.neighbors:
                stats.per_role[r] += 1
    return catalog, stats


def write_catalog(path, scenarios: Iterable[Scenario]) -> None:
    with Path(path).open("w") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def read_catalog(path) -> List[Scenario]:
    out = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Scenario.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad scenario record ({exc})") from None
    return out
