"""Synthetic corpora with planted lane changes, and pursuit scenarios.

Each planted lane change lives in its own time block so that vehicles of
different blocks never coexist. The lateral profile is a raised-cosine step
between lane centers whose boundary crossing time is known in closed form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ingest import DEFAULT_DT, DEFAULT_LANE_WIDTH, LaneMap, Trajectory, match_lanes, straight_highway
from .mining import LaneChangeEvent, Scenario

FAILURES = ("no_neighbor", "short_neighbor", "outlier", "gap")


@dataclass(frozen=True)
class PlantedChange:
    vehicle_id: str
    change_frame: int  # index into the ego's resampled trajectory
    prev_lane: int
    new_lane: int
    passes: bool
    failure: Optional[str] = None
    neighbor_role: Optional[str] = None


def crossing_frame(t_cross: float, t0: float, dt: float = DEFAULT_DT) -> int:
    """First sample index strictly after the boundary crossing time."""
    return int(math.floor((t_cross - t0) / dt + 1e-9)) + 1


def _smoothstep_y(t, y_from, y_to, t_mid, duration):
    s = np.clip((t - (t_mid - duration / 2)) / duration, 0.0, 1.0)
    return y_from + (y_to - y_from) * (0.5 - 0.5 * np.cos(np.pi * s))


def planted_corpus(n_changes: int = 50, n_clean: int = 30, seed: int = 0, n_lanes: int = 5,
                   lane_width: float = DEFAULT_LANE_WIDTH, dt: float = DEFAULT_DT,
                   lateral_noise: float = 0.01) -> Tuple[Dict[str, Trajectory], LaneMap, List[PlantedChange]]:
    """Corpus with ``n_changes`` lane changes of which ``n_clean`` pass cleaning.

    Failing changes cycle through :data:`FAILURES`. Returns (trajectories by id,
    lane map, planted ground truth).
    """
    if not 0 <= n_clean <= n_changes:
        raise ValueError("need 0 <= n_clean <= n_changes")
    rng = np.random.default_rng(seed)
    lane_map = straight_highway(n_lanes, lane_width)
    block_frames = 300  # 30 s per block, 12 s of traffic
    span = 120
    trajs: Dict[str, Trajectory] = {}
    truth: List[PlantedChange] = []
    next_id = 1

    def add(frames, x, y, vid=None):
        nonlocal next_id
        vid = vid or str(next_id)
        next_id += 1
        t = frames * dt
        y = y + rng.normal(0.0, lateral_noise, len(y))
        heading = np.zeros(len(t))
        speed = np.full(len(t), 0.0)
        trajs[vid] = Trajectory(vid, t, x, y, speed, heading, match_lanes(lane_map, x, y))
        return vid

    clean_slots = set(rng.choice(n_changes, n_clean, replace=False).tolist())
    fail_i = 0
    for i in range(n_changes):
        k0 = 1000 + i * block_frames
        frames = np.arange(k0, k0 + span)
        t = frames * dt
        prev = int(rng.integers(1, n_lanes - 1))
        new = prev + (1 if rng.random() < 0.5 else -1)
        v = float(rng.uniform(20.0, 30.0))
        x = 100.0 + v * (t - t[0])
        # crossing between grid points, 5-7 s into the block
        t_cross = t[0] + float(rng.integers(50, 70)) * dt + 0.5 * dt
        y = _smoothstep_y(t, prev * lane_width, new * lane_width, t_cross, 3.0)
        passes = i in clean_slots
        failure = None if passes else FAILURES[fail_i % len(FAILURES)]
        if not passes:
            fail_i += 1
        cf = crossing_frame(t_cross, t[0], dt)
        ego_frames = frames
        if failure == "outlier":
            x = x.copy()
            x[cf + 10] += 50.0
        if failure == "gap":
            keep = np.ones(span, bool)
            keep[cf + 5: cf + 12] = False
            ego_frames, x, y = frames[keep], x[keep], y[keep]
        ego_id = add(ego_frames, x, y)

        role = None
        if failure != "no_neighbor":
            gap = float(rng.uniform(12.0, 30.0))
            ahead = rng.random() < 0.5
            nx = 100.0 + (gap if ahead else -gap) + v * (t - t[0])
            ny = np.full(span, new * lane_width)
            nframes = frames
            if failure == "short_neighbor":
                stop = cf + 10
                nframes, nx, ny = frames[:stop], nx[:stop], ny[:stop]
            add(nframes, nx, ny)
            side = "L" if new < prev else "R"
            role = side + ("F" if ahead else "B")
        # an uninvolved vehicle two lanes away, where possible
        far = prev + 2 if prev + 2 < n_lanes else prev - 2
        if 0 <= far < n_lanes and far != new:
            add(frames, 100.0 + v * (t - t[0]) + float(rng.uniform(-40, 40)), np.full(span, far * lane_width))
        truth.append(PlantedChange(ego_id, cf, prev, new, passes, failure, role))
    return trajs, lane_map, truth


def write_corpus_csv(path, trajs: Dict[str, Trajectory], dt: float = DEFAULT_DT) -> None:
    """Write in the default ``Vehicle_ID,Frame_ID,Local_X,Local_Y`` layout."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"])
        for tr in trajs.values():
            for ti, xi, yi in zip(tr.t, tr.x, tr.y):
                w.writerow([tr.vehicle_id, int(round(ti / dt)), repr(float(xi)), repr(float(yi))])


def _straight(vid, t, x0, y0, v, lane_map, lateral=None) -> Trajectory:
    x = x0 + v * (t - t[0])
    y = np.full(len(t), float(y0)) if lateral is None else lateral
    heading = np.zeros(len(t))
    dy = np.diff(y)
    heading[1:] = np.arctan2(dy, np.diff(x))
    heading[0] = heading[1]
    speed = np.empty(len(t))
    speed[1:] = np.hypot(np.diff(x), dy) / np.diff(t)
    speed[0] = speed[1]
    return Trajectory(vid, t, x, y, speed, heading, match_lanes(lane_map, x, y))


def pursuit_scenario(index: int, rng: np.random.Generator, lane_map: Optional[LaneMap] = None,
                     dt: float = DEFAULT_DT, steps: int = 41) -> Scenario:
    """Straight road; the ego moves one lane left while a follower trails in the target lane.

    The follower (role LB) drives at the ego's speed, so any closing of the
    gap has to come from the controlling policy.
    """
    lane_map = lane_map or straight_highway(3)
    w = lane_map[0].width
    k0 = 100 + index * 1000
    t = np.arange(k0, k0 + steps) * dt
    v = float(rng.uniform(22.0, 28.0))
    t_mid = t[0] + (steps // 2) * dt + 0.5 * dt
    ego_y = _smoothstep_y(t, w, 0.0, t_mid, 2.5)
    ego = _straight("ego", t, 0.0, 0.0, v, lane_map, lateral=ego_y)
    gap = float(rng.uniform(12.0, 20.0))
    follower = _straight("follower", t, -gap, 0.0, v, lane_map,
                         lateral=rng.normal(0.0, 0.02, steps))
    cf = crossing_frame(t_mid, t[0], dt)
    event = LaneChangeEvent("ego", cf, 1, 0)
    return Scenario(f"pursuit-{index}", ego, {"LB": follower}, event, (float(t[0]), float(t[-1])),
                    source="pursuit", dt=dt)


def pursuit_catalog(n: int = 16, seed: int = 0) -> List[Scenario]:
    rng = np.random.default_rng(seed)
    lane_map = straight_highway(3)
    return [pursuit_scenario(i, rng, lane_map) for i in range(n)]
