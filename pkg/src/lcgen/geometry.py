"""Oriented-rectangle footprints and separating-axis overlap tests."""
from __future__ import annotations

import numpy as np


def box_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners of oriented rectangles, shape ``(..., 4, 2)``, counter-clockwise."""
    x, y, heading, length, width = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, y, heading, length, width)))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    cx = x[..., None] + c[..., None] * lx - s[..., None] * ly
    cy = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([cx, cy], axis=-1)


def sat_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for rectangles given as corner arrays ``(..., 4, 2)``.

    Touching boundaries count as overlap. Broadcasts over leading dimensions.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    # two edge normals per rectangle suffice
    edges = np.concatenate([a[..., 1:3, :] - a[..., 0:2, :], b[..., 1:3, :] - b[..., 0:2, :]], axis=-2)
    axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    pa = np.einsum("...kj,...aj->...ak", a, axes)
    pb = np.einsum("...kj,...aj->...ak", b, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def boxes_overlap(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2) -> np.ndarray:
    """Overlap of two sets of oriented boxes with a bounding-circle prefilter."""
    reach = 0.5 * (np.hypot(l1, w1) + np.hypot(l2, w2))
    near = np.hypot(np.asarray(x1) - x2, np.asarray(y1) - y2) <= reach
    out = np.zeros(np.shape(near), dtype=bool)
    if np.any(near):
        ca = box_corners(x1, y1, h1, l1, w1)
        cb = box_corners(x2, y2, h2, l2, w2)
        ca, cb = np.broadcast_arrays(ca, cb)
        out[near] = sat_overlap(ca[near], cb[near])
    return out


def point_in_box(px, py, x, y, heading, length, width) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    dx, dy = np.asarray(px) - x, np.asarray(py) - y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= 0.5 * length) & (np.abs(ly) <= 0.5 * width)
