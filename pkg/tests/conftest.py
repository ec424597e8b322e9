import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from lcgen.ingest import Trajectory, match_lanes, straight_highway
from lcgen.synthetic import pursuit_catalog


def make_traj(vid, t, x, y, lane_map=None, length=5.0, width=2.0):
    t, x, y = (np.asarray(a, dtype=float) for a in (t, x, y))
    dx, dy = np.diff(x), np.diff(y)
    speed = np.empty(len(t))
    speed[1:] = np.hypot(dx, dy) / np.diff(t)
    speed[0] = speed[1]
    heading = np.zeros(len(t))
    heading[1:] = np.arctan2(dy, dx)
    heading[0] = heading[1]
    lane = match_lanes(lane_map, x, y) if lane_map is not None else np.full(len(t), -1)
    return Trajectory(vid, t, x, y, speed, heading, lane, length, width)


@pytest.fixture
def highway():
    return straight_highway(5)


@pytest.fixture(scope="session")
def pursuit():
    return pursuit_catalog(6, 0)
