"""Trajectory corpora and lane maps.

Trajectories are stored column-wise (one numpy array per kinematic channel)
and resampled onto a global time grid ``k * dt`` so that vehicles recorded
at the same instants share sample times exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

UNKNOWN_LANE = -1
DEFAULT_DT = 0.1
DEFAULT_LANE_WIDTH = 3.7
DEFAULT_LENGTH = 5.0
DEFAULT_WIDTH = 2.0
MAX_GAP = 0.5
LANE_MAP_FORMAT_VERSION = 1


class IngestError(ValueError):
    """Raised for unreadable or inconsistent input files."""


class SchemaError(IngestError):
    pass


class EmptyInputError(IngestError):
    pass


class GapError(IngestError):
    pass


class LaneMapError(IngestError):
    pass


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class TrajectorySample:
    time: float
    x: float
    y: float
    speed: float
    heading: float
    lane_index: Optional[int] = None


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Kinematic record of one vehicle.

    ``gaps`` lists source intervals longer than the gap threshold that were
    bridged by interpolation; miners use it to reject windows.
    """

    vehicle_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    lane: np.ndarray
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH
    gaps: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vehicle_id", str(self.vehicle_id))
        for name in ("t", "x", "y", "speed", "heading"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "lane", _frozen(self.lane, dtype=np.int64))
        n = len(self.t)
        if n < 2:
            raise IngestError(f"vehicle {self.vehicle_id}: trajectory needs >= 2 samples")
        for name in ("x", "y", "speed", "heading", "lane"):
            if len(getattr(self, name)) != n:
                raise IngestError(f"vehicle {self.vehicle_id}: column {name} has wrong length")
        if np.any(np.diff(self.t) <= 0):
            raise IngestError(f"vehicle {self.vehicle_id}: time must be strictly increasing")
        if np.any(self.speed < 0):
            raise IngestError(f"vehicle {self.vehicle_id}: negative speed")
        if not (self.length > 0 and self.width > 0):
            raise IngestError(f"vehicle {self.vehicle_id}: length and width must be positive")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> List[TrajectorySample]:
        return [
            TrajectorySample(
                float(self.t[i]), float(self.x[i]), float(self.y[i]), float(self.speed[i]),
                float(self.heading[i]), None if self.lane[i] == UNKNOWN_LANE else int(self.lane[i]),
            )
            for i in range(len(self.t))
        ]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def replace(self, **changes) -> "Trajectory":
        fields = dict(
            vehicle_id=self.vehicle_id, t=self.t, x=self.x, y=self.y, speed=self.speed,
            heading=self.heading, lane=self.lane, length=self.length, width=self.width, gaps=self.gaps,
        )
        fields.update(changes)
        return Trajectory(**fields)

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Samples ``start..stop-1`` (gaps outside the slice are dropped)."""
        t0, t1 = self.t[start], self.t[stop - 1]
        gaps = tuple(g for g in self.gaps if g[1] > t0 and g[0] < t1)
        return self.replace(
            t=self.t[start:stop], x=self.x[start:stop], y=self.y[start:stop],
            speed=self.speed[start:stop], heading=self.heading[start:stop],
            lane=self.lane[start:stop], gaps=gaps,
        )

    def to_dict(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "length": float(self.length),
            "width": float(self.width),
            "t": self.t.tolist(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "speed": self.speed.tolist(),
            "heading": self.heading.tolist(),
            "lane": self.lane.tolist(),
            "gaps": [list(g) for g in self.gaps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            vehicle_id=d["vehicle_id"], t=d["t"], x=d["x"], y=d["y"], speed=d["speed"],
            heading=d["heading"], lane=d["lane"], length=d["length"], width=d["width"],
            gaps=tuple(tuple(g) for g in d.get("gaps", [])),
        )


@dataclass(frozen=True)
class Schema:
    """Column mapping for trajectory CSV files.

    Time is either ``time`` (seconds) or ``frame`` times ``frame_dt``. Optional
    columns set to ``None`` are derived by finite differences.
    ``length_scale`` converts position/size units to meters (NGSIM uses feet).
    """

    vehicle_id: str = "Vehicle_ID"
    frame: Optional[str] = "Frame_ID"
    time: Optional[str] = None
    x: str = "Local_X"
    y: str = "Local_Y"
    speed: Optional[str] = None
    heading: Optional[str] = None
    lane: Optional[str] = None
    length: Optional[str] = None
    width: Optional[str] = None
    frame_dt: float = DEFAULT_DT
    length_scale: float = 1.0

    @classmethod
    def ngsim(cls) -> "Schema":
        """NGSIM US-101/I-80 layout: Local_Y is longitudinal, units are feet."""
        return cls(x="Local_Y", y="Local_X", length="v_Length", width="v_Width", length_scale=0.3048)

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


def _derive_heading(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = len(x)
    heading = np.zeros(n)
    dx, dy = np.diff(x), np.diff(y)
    moving = np.hypot(dx, dy) > 1e-9
    last = 0.0
    for i in range(n - 1):
        if moving[i]:
            last = math.atan2(dy[i], dx[i])
        heading[i + 1] = last
    # first sample takes the first known direction
    first = np.argmax(moving) if moving.any() else None
    heading[0] = math.atan2(dy[first], dx[first]) if first is not None else 0.0
    return heading


def _speed_from_positions(t: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # backward difference; sample 0 copies sample 1
    v = np.empty(len(t))
    v[1:] = np.hypot(np.diff(x), np.diff(y)) / np.diff(t)
    v[0] = v[1]
    return v


def load_trajectories(path, schema: Optional[Schema] = None) -> Dict[str, Trajectory]:
    """Read a trajectory CSV into one :class:`Trajectory` per vehicle id.

    Returns a dict keyed by vehicle id, in order of first appearance.
    """
    schema = schema or Schema()
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    rows: Dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}
        if schema.time is None and schema.frame is None:
            raise SchemaError("schema needs a time or frame column")
        required = [schema.vehicle_id, schema.time or schema.frame, schema.x, schema.y]
        optional = [schema.speed, schema.heading, schema.lane, schema.length, schema.width]
        for name in required + [o for o in optional if o]:
            if name not in col:
                raise SchemaError(f"{path}: missing column {name!r}")
        time_col = col[schema.time or schema.frame]
        time_scale = 1.0 if schema.time else schema.frame_dt
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            line = reader.line_num
            if len(row) != len(header):
                raise IngestError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                vid = row[col[schema.vehicle_id]].strip()
                rec = [
                    float(row[time_col]) * time_scale,
                    float(row[col[schema.x]]) * schema.length_scale,
                    float(row[col[schema.y]]) * schema.length_scale,
                ]
                for name, scale in zip(optional, (schema.length_scale, 1.0, 1.0, schema.length_scale, schema.length_scale)):
                    rec.append(float(row[col[name]]) * scale if name else math.nan)
            except ValueError as exc:
                raise IngestError(f"{path}:{line}: malformed row ({exc})") from None
            if not all(math.isfinite(v) for v in rec[:3]):
                raise IngestError(f"{path}:{line}: non-finite value")
            rows.setdefault(vid, []).append(rec)
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    out: Dict[str, Trajectory] = {}
    for vid, recs in rows.items():
        arr = np.array(recs, dtype=float)
        arr = arr[np.argsort(arr[:, 0], kind="stable")]
        t, x, y = arr[:, 0], arr[:, 1], arr[:, 2]
        if np.any(np.diff(t) <= 0):
            raise IngestError(f"{path}: vehicle {vid} has duplicate timestamps")
        speed = arr[:, 3] if schema.speed else _speed_from_positions(t, x, y)
        heading = wrap_angle(arr[:, 4]) if schema.heading else _derive_heading(x, y)
        lane = arr[:, 5].astype(np.int64) if schema.lane else np.full(len(t), UNKNOWN_LANE)
        length = float(np.nanmedian(arr[:, 6])) if schema.length else DEFAULT_LENGTH
        width = float(np.nanmedian(arr[:, 7])) if schema.width else DEFAULT_WIDTH
        out[vid] = Trajectory(vid, t, x, y, speed, heading, lane, length, width)
    return out


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    """Write trajectories as CSV readable with ``Schema(time="time", ...)``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "time", "x", "y", "speed", "heading", "lane", "length", "width"])
        for tr in trajectories:
            for i in range(len(tr)):
                w.writerow([
                    tr.vehicle_id, repr(float(tr.t[i])), repr(float(tr.x[i])), repr(float(tr.y[i])),
                    repr(float(tr.speed[i])), repr(float(tr.heading[i])), int(tr.lane[i]),
                    repr(float(tr.length)), repr(float(tr.width)),
                ])


ROUNDTRIP_SCHEMA = Schema(
    vehicle_id="vehicle_id", frame=None, time="time", x="x", y="y", speed="speed",
    heading="heading", lane="lane", length="length", width="width",
)


def resample(tr: Trajectory, dt: float = DEFAULT_DT, max_gap: Optional[float] = MAX_GAP) -> Trajectory:
    """Resample onto the grid ``k*dt`` covering the trajectory's time span.

    Positions are linearly interpolated; heading is interpolated along the
    shorter arc; speed is recomputed from positions. Source intervals longer
    than ``max_gap`` raise :class:`GapError`; with ``max_gap=None`` they are
    bridged and recorded in ``gaps`` instead.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if tr.duration < dt - 1e-12:
        raise IngestError(f"vehicle {tr.vehicle_id}: duration {tr.duration} shorter than dt")
    src_dt = np.diff(tr.t)
    big = src_dt > MAX_GAP + 1e-9 if max_gap is None else src_dt > max_gap + 1e-9
    if big.any() and max_gap is not None:
        i = int(np.argmax(big))
        raise GapError(f"vehicle {tr.vehicle_id}: gap of {src_dt[i]:.3f} s at t={tr.t[i]:.3f}")
    gaps = tuple((float(tr.t[i]), float(tr.t[i + 1])) for i in np.flatnonzero(big))

    k0 = math.ceil(tr.t[0] / dt - 1e-9)
    k1 = math.floor(tr.t[-1] / dt + 1e-9)
    ks = np.arange(k0, k1 + 1)
    t = ks * dt
    if len(t) < 2:
        raise IngestError(f"vehicle {tr.vehicle_id}: fewer than 2 grid points")
    # clamp grid ends that fall within rounding distance of the source span
    tq = np.clip(t, tr.t[0], tr.t[-1])
    x = np.interp(tq, tr.t, tr.x)
    y = np.interp(tq, tr.t, tr.y)
    unwrapped = np.unwrap(tr.heading)
    heading = wrap_angle(np.interp(tq, tr.t, unwrapped))
    idx = np.searchsorted(tr.t, tq)
    idx_c = np.minimum(idx, len(tr.t) - 1)
    exact = tr.t[idx_c] == tq
    # nodes that coincide with source samples keep the source values bit-for-bit
    x = np.where(exact, tr.x[idx_c], x)
    y = np.where(exact, tr.y[idx_c], y)
    heading = np.where(exact, tr.heading[idx_c], heading)
    nearest = np.clip(np.searchsorted(tr.t, tq - 0.5 * dt), 0, len(tr.t) - 1)
    lane = np.where(exact, tr.lane[idx_c], tr.lane[nearest])
    speed = _speed_from_positions(t, x, y)
    return tr.replace(t=t, x=x, y=y, speed=speed, heading=heading, lane=lane, gaps=gaps)


@dataclass(frozen=True)
class Lane:
    lane_id: int
    centerline: np.ndarray
    width: float = DEFAULT_LANE_WIDTH
    adjacency: Tuple[int, ...] = ()
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "centerline", _frozen(self.centerline))
        c = self.centerline
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 2:
            raise LaneMapError(f"lane {self.lane_id}: centerline needs >= 2 (x, y) points")
        if not self.width > 0:
            raise LaneMapError(f"lane {self.lane_id}: width must be positive")
        if self.priority not in (0, 1):
            raise LaneMapError(f"lane {self.lane_id}: priority must be 0 or 1")
        object.__setattr__(self, "adjacency", tuple(sorted(int(a) for a in self.adjacency)))


@dataclass(frozen=True)
class LaneMap:
    lanes: Tuple[Lane, ...]
    _by_id: Dict[int, Lane] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        lanes = tuple(sorted(self.lanes, key=lambda ln: ln.lane_id))
        object.__setattr__(self, "lanes", lanes)
        by_id = {}
        for ln in lanes:
            if ln.lane_id in by_id:
                raise LaneMapError(f"duplicate lane id {ln.lane_id}")
            by_id[ln.lane_id] = ln
        for ln in lanes:
            for a in ln.adjacency:
                if a not in by_id:
                    raise LaneMapError(f"lane {ln.lane_id}: adjacent lane {a} does not exist")
                if ln.lane_id not in by_id[a].adjacency:
                    raise LaneMapError(f"asymmetric adjacency between lanes {ln.lane_id} and {a}")
        object.__setattr__(self, "_by_id", by_id)

    def __getitem__(self, lane_id: int) -> Lane:
        return self._by_id[lane_id]

    def __contains__(self, lane_id) -> bool:
        return lane_id in self._by_id

    @property
    def lane_ids(self) -> List[int]:
        return [ln.lane_id for ln in self.lanes]

    def adjacent(self, a: int, b: int) -> bool:
        return a in self._by_id and b in self._by_id[a].adjacency

    def priority(self, lane_id: int) -> int:
        ln = self._by_id.get(lane_id)
        return ln.priority if ln else 0

    def to_dict(self) -> dict:
        return {
            "format_version": LANE_MAP_FORMAT_VERSION,
            "lanes": [
                {
                    "id": ln.lane_id,
                    "centerline": ln.centerline.tolist(),
                    "width": ln.width,
                    "adjacent": list(ln.adjacency),
                    "priority": ln.priority,
                }
                for ln in self.lanes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, symmetrize: bool = False) -> "LaneMap":
        version = d.get("format_version")
        if version != LANE_MAP_FORMAT_VERSION:
            raise LaneMapError(f"unsupported lane-map format_version {version!r}")
        raw = d.get("lanes")
        if not isinstance(raw, list):
            raise LaneMapError("lane map needs a 'lanes' list")
        adj = {int(r["id"]): set(int(a) for a in r.get("adjacent", [])) for r in raw}
        if symmetrize:
            for a, ns in list(adj.items()):
                for b in ns:
                    if b in adj:
                        adj[b].add(a)
        lanes = []
        for r in raw:
            try:
                lanes.append(Lane(
                    lane_id=int(r["id"]),
                    centerline=np.asarray(r["centerline"], dtype=float),
                    width=float(r.get("width", DEFAULT_LANE_WIDTH)),
                    adjacency=tuple(adj[int(r["id"])]),
                    priority=int(r.get("priority", 0)),
                ))
            except KeyError as exc:
                raise LaneMapError(f"lane entry missing field {exc}") from None
        return cls(tuple(lanes))


def straight_highway(n_lanes: int = 5, width: float = DEFAULT_LANE_WIDTH, x_range=(-1000.0, 5000.0),
                     priorities: Optional[Sequence[int]] = None) -> LaneMap:
    """Parallel straight lanes, lane ``k`` centered at ``y = k * width``."""
    lanes = []
    for k in range(n_lanes):
        adj = [j for j in (k - 1, k + 1) if 0 <= j < n_lanes]
        lanes.append(Lane(
            k, np.array([[x_range[0], k * width], [x_range[1], k * width]]), width, tuple(adj),
            int(priorities[k]) if priorities is not None else 0,
        ))
    return LaneMap(tuple(lanes))


def load_lane_map(path, symmetrize: bool = False) -> LaneMap:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LaneMapError(f"{path}: invalid JSON ({exc})") from None
    return LaneMap.from_dict(data, symmetrize=symmetrize)


def save_lane_map(path, lane_map: LaneMap) -> None:
    Path(path).write_text(json.dumps(lane_map.to_dict(), indent=1) + "\n")


def _polyline_distance(points: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Perpendicular (clamped) distance from each point to a polyline."""
    a = line[:-1]
    b = line[1:]
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    denom = np.einsum("sj,sj->s", ab, ab)
    s = np.clip(np.einsum("nsj,sj->ns", ap, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    d = np.hypot(*(points[:, None, :] - closest).transpose(2, 0, 1))
    return d.min(axis=1)


def match_lanes(lane_map: LaneMap, xs, ys, tie_tol: float = 1e-9) -> np.ndarray:
    """Vectorised :func:`match_lane`; unknown lanes are ``UNKNOWN_LANE``."""
    if not lane_map.lanes:
        raise LaneMapError("lane map is empty")
    pts = np.column_stack([np.asarray(xs, float).ravel(), np.asarray(ys, float).ravel()])
    if not np.all(np.isfinite(pts)):
        raise ValueError("positions must be finite")
    d = np.stack([_polyline_distance(pts, ln.centerline) for ln in lane_map.lanes], axis=1)
    widths = np.array([ln.width for ln in lane_map.lanes])
    ids = np.array(lane_map.lane_ids)
    best = d.min(axis=1, keepdims=True)
    # lanes are sorted by id, so the first lane within tolerance wins ties
    choice = np.argmax(d <= best + tie_tol, axis=1)
    out = ids[choice]
    out = np.where(best[:, 0] > widths[choice], UNKNOWN_LANE, out)
    return out.reshape(np.shape(xs))


def match_lane(lane_map: LaneMap, position) -> Optional[int]:
    """Lane whose centerline is nearest; ``None`` if farther than the lane width."""
    lane = int(match_lanes(lane_map, [position[0]], [position[1]])[0])
    return None if lane == UNKNOWN_LANE else lane


def assign_lanes(tr: Trajectory, lane_map: LaneMap) -> Trajectory:
    return tr.replace(lane=match_lanes(lane_map, tr.x, tr.y))
