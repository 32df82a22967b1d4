"""Planar geometry kernels: oriented boxes, polylines and Bezier curves.

Everything here is a pure function of its inputs. Scalar entry points
(``obb_overlap``, ``project_to_polyline``) have vectorized twins
(``boxes_overlap``, ``Polyline.project_many``) that the simulator and the
resampler use on whole batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class HorizonMismatchError(ValueError):
    """Two trajectories that should share a time axis do not."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return angle - TWO_PI * math.ceil((angle - math.pi) / TWO_PI)


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    return angles - TWO_PI * np.ceil((angles - np.pi) / TWO_PI)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box extents must be positive, got {self.length}x{self.width}")
        if self.width > self.length:
            raise ValueError("box width may not exceed its length")

    def corners(self) -> np.ndarray:
        """Corner coordinates, counter-clockwise starting at front-left."""
        return box_corners(
            self.center.x, self.center.y, self.center.heading, self.length, self.width
        )


def box_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners of (possibly batched) boxes, shape ``(..., 4, 2)``, counter-clockwise."""
    x, y, heading, hl, hw = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, y, heading, length, width))
    )
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    lon = np.array([1.0, -1.0, -1.0, 1.0]) * (hl[..., None] / 2.0)
    lat = np.array([1.0, 1.0, -1.0, -1.0]) * (hw[..., None] / 2.0)
    cx = x[..., None] + lon * c - lat * s
    cy = y[..., None] + lon * s + lat * c
    return np.stack([cx, cy], axis=-1)


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test on the closed rectangles; touching counts as overlap."""
    dx = b.center.x - a.center.x
    dy = b.center.y - a.center.y
    ca, sa = math.cos(a.center.heading), math.sin(a.center.heading)
    cb, sb = math.cos(b.center.heading), math.sin(b.center.heading)
    hla, hwa = a.length / 2.0, a.width / 2.0
    hlb, hwb = b.length / 2.0, b.width / 2.0
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        dist = abs(dx * ux + dy * uy)
        ra = hla * abs(ca * ux + sa * uy) + hwa * abs(-sa * ux + ca * uy)
        rb = hlb * abs(cb * ux + sb * uy) + hwb * abs(-sb * ux + cb * uy)
        if dist > ra + rb:
            return False
    return True


def boxes_overlap(xa, ya, ha, la, wa, xb, yb, hb, lb, wb) -> np.ndarray:
    """Broadcasting separating-axis test. Returns a boolean array."""
    dx = np.asarray(xb, float) - xa
    dy = np.asarray(yb, float) - ya
    ca, sa = np.cos(ha), np.sin(ha)
    cb, sb = np.cos(hb), np.sin(hb)
    hla, hwa = np.asarray(la, float) / 2.0, np.asarray(wa, float) / 2.0
    hlb, hwb = np.asarray(lb, float) / 2.0, np.asarray(wb, float) / 2.0
    # |cos| and |sin| of the relative heading appear on every axis
    rc = np.abs(ca * cb + sa * sb)
    rs = np.abs(ca * sb - sa * cb)
    overlap = np.abs(dx * ca + dy * sa) <= hla + hlb * rc + hwb * rs
    overlap &= np.abs(-dx * sa + dy * ca) <= hwa + hlb * rs + hwb * rc
    overlap &= np.abs(dx * cb + dy * sb) <= hlb + hla * rc + hwa * rs
    overlap &= np.abs(-dx * sb + dy * cb) <= hwb + hla * rs + hwa * rc
    return overlap


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(np.sum((p - closest) ** 2, axis=-1))


def boxes_gap(xa, ya, ha, la, wa, xb, yb, hb, lb, wb) -> np.ndarray:
    """Euclidean gap between box pairs (0 where they overlap)."""
    ca = box_corners(xa, ya, ha, la, wa)
    cb = box_corners(xb, yb, hb, lb, wb)
    ca, cb = np.broadcast_arrays(ca, cb)
    best = None
    for src, dst in ((ca, cb), (cb, ca)):
        for e in range(4):
            a = dst[..., e, :]
            b = dst[..., (e + 1) % 4, :]
            d = _point_segment_distance(src, a[..., None, :], b[..., None, :]).min(axis=-1)
            best = d if best is None else np.minimum(best, d)
    touching = boxes_overlap(xa, ya, ha, la, wa, xb, yb, hb, lb, wb)
    return np.where(touching, 0.0, best)


def _as_trajectory(traj) -> np.ndarray:
    """Accept an ``(K, >=3)`` array or a sequence of states with a ``pose``."""
    if isinstance(traj, np.ndarray):
        arr = traj
    else:
        rows = []
        for st in traj:
            if hasattr(st, "pose"):
                rows.append(
                    [st.pose.x, st.pose.y, st.pose.heading, st.speed, 1.0 if st.valid else 0.0]
                )
            else:
                rows.append(list(st))
        arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] < 3:
        raise ValueError("trajectory must be a (K, >=3) array of x, y, heading, ...")
    return arr


def collision_mask(traj_a, dims_a, traj_b, dims_b) -> np.ndarray:
    """Per-step overlap flags for two aligned trajectories (invalid steps never collide)."""
    a = _as_trajectory(traj_a)
    b = _as_trajectory(traj_b)
    if a.shape[0] != b.shape[0]:
        raise HorizonMismatchError(
            f"trajectories are misaligned: {a.shape[0]} vs {b.shape[0]} steps"
        )
    hit = boxes_overlap(
        a[:, 0], a[:, 1], a[:, 2], dims_a[0], dims_a[1],
        b[:, 0], b[:, 1], b[:, 2], dims_b[0], dims_b[1],
    )
    if a.shape[1] >= 5:
        hit &= a[:, 4] > 0.5
    if b.shape[1] >= 5:
        hit &= b[:, 4] > 0.5
    return hit


def earliest_collision_step(traj_a, dims_a, traj_b, dims_b) -> int | None:
    """Index of the first step at which the two footprints overlap, or None."""
    hit = collision_mask(traj_a, dims_a, traj_b, dims_b)
    if not hit.any():
        return None
    return int(np.argmax(hit))


class Polyline:
    """An ordered chain of 2D points with arc-length bookkeeping."""

    __slots__ = ("points", "cumlen", "_dirs", "_seglen")

    def __init__(self, points):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a polyline needs at least two (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        seg = np.diff(pts, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seglen <= 1e-9):
            i = int(np.argmax(seglen <= 1e-9))
            raise ValueError(f"polyline points {i} and {i + 1} coincide")
        pts.setflags(write=False)
        self.points = pts
        self._seglen = seglen
        self._dirs = seg / seglen[:, None]
        cum = np.concatenate([[0.0], np.cumsum(seglen)])
        cum.setflags(write=False)
        self.cumlen = cum

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"Polyline({len(self.points)} points, {self.length:.2f} m)"

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])

    @property
    def segment_dirs(self) -> np.ndarray:
        return self._dirs

    @property
    def segment_lengths(self) -> np.ndarray:
        return self._seglen

    def _locate(self, s):
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cumlen, s, side="right") - 1, 0, len(self._seglen) - 1)
        return idx, s - self.cumlen[idx]

    def point_at(self, s, extrapolate: bool = False) -> np.ndarray:
        """Point at arc-length ``s``; clamped to the ends unless ``extrapolate``."""
        s = np.asarray(s, dtype=float)
        if not extrapolate:
            s = np.clip(s, 0.0, self.length)
        idx, local = self._locate(s)
        return self.points[idx] + local[..., None] * self._dirs[idx]

    def heading_at(self, s) -> np.ndarray:
        idx, _ = self._locate(np.clip(np.asarray(s, float), 0.0, self.length))
        d = self._dirs[idx]
        return np.arctan2(d[..., 1], d[..., 0])

    def smooth_heading_at(self, s) -> np.ndarray:
        """Heading interpolated between vertex tangents, continuous in ``s``.

        Vertex tangents average the two adjacent segment directions, so the
        heading turns gradually along a finely sampled curve instead of
        jumping at every vertex.
        """
        s = np.clip(np.asarray(s, float), 0.0, self.length)
        d = self._dirs
        vt = np.concatenate([d[:1], d[:-1] + d[1:], d[-1:]])
        vt /= np.maximum(np.hypot(vt[:, 0], vt[:, 1]), 1e-12)[:, None]
        mid = self.cumlen[:-1] + 0.5 * self._seglen
        # heading equals the segment direction at each segment midpoint and
        # blends toward the vertex tangents on either side
        knots = np.concatenate([[0.0], np.column_stack([mid, self.cumlen[1:]]).ravel()])
        vecs = np.concatenate([vt[:1], np.stack([d, vt[1:]], axis=1).reshape(-1, 2)])
        vx = np.interp(s, knots, vecs[:, 0])
        vy = np.interp(s, knots, vecs[:, 1])
        return np.arctan2(vy, vx)

    def project_many(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection of ``(B, 2)`` points; see ``project_to_polyline``."""
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        a = self.points[:-1]
        rel = p[:, None, :] - a[None, :, :]
        t = np.sum(rel * self._dirs[None], axis=-1)
        t = np.clip(t, 0.0, self._seglen[None, :])
        foot = a[None] + t[..., None] * self._dirs[None]
        d2 = np.sum((p[:, None, :] - foot) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        arc = self.cumlen[best] + t[rows, best]
        rb = rel[rows, best]
        db = self._dirs[best]
        offset = db[:, 0] * rb[:, 1] - db[:, 1] * rb[:, 0]
        return arc, offset

    def resample(self, step: float) -> "Polyline":
        n = max(2, int(math.ceil(self.length / step)) + 1)
        return Polyline(self.point_at(np.linspace(0.0, self.length, n)))

    def reversed(self) -> "Polyline":
        return Polyline(self.points[::-1])


def project_to_polyline(p, line: Polyline) -> tuple[float, float]:
    """Arc-length of the nearest point and the signed lateral offset (left positive).

    Points past either end clamp to that end's arc-length; their offset is
    measured against the extension of the end segment.
    """
    arc, off = line.project_many(np.asarray(p, dtype=float)[None, :])
    return float(arc[0]), float(off[0])


def bezier_points(control, samples: int) -> np.ndarray:
    """Evaluate a Bezier curve at ``samples`` uniformly spaced parameters (de Casteljau)."""
    ctrl = np.asarray(control, dtype=float)
    if ctrl.ndim != 2 or ctrl.shape[0] < 2:
        raise ValueError("a Bezier curve needs at least two control points")
    if samples < 2:
        raise ValueError("need at least two samples")
    t = np.linspace(0.0, 1.0, samples)[:, None, None]
    pts = np.broadcast_to(ctrl, (samples,) + ctrl.shape).copy()
    for _ in range(ctrl.shape[0] - 1):
        pts = (1.0 - t) * pts[:, :-1] + t * pts[:, 1:]
    return pts[:, 0, :]


def bezier_fit(waypoints, samples: int) -> Polyline:
    """Single Bezier curve using every waypoint as a control point."""
    return Polyline(bezier_points(waypoints, samples))


def bezier_through(waypoints, samples_per_segment: int = 40, start_dir=None) -> Polyline:
    """Piecewise cubic Bezier path passing through every waypoint.

    Inner tangents follow the chord between neighbouring waypoints; each
    segment's handles are a third of its chord length, which keeps unevenly
    spaced waypoints from producing loops. ``start_dir`` fixes the initial
    tangent (e.g. the vehicle heading).
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least two 2D waypoints")
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be at least 2")
    n = len(pts)
    dirs = np.empty_like(pts)
    dirs[0] = pts[1] - pts[0] if start_dir is None else start_dir
    dirs[-1] = pts[-1] - pts[-2]
    dirs[1:-1] = pts[2:] - pts[:-2]
    norms = np.hypot(dirs[:, 0], dirs[:, 1])
    if np.any(norms == 0.0):
        raise ValueError("waypoints must not repeat")
    dirs /= norms[:, None]
    pieces = []
    for i in range(n - 1):
        a, b = pts[i], pts[i + 1]
        h = np.hypot(*(b - a)) / 3.0
        if h == 0.0:
            raise ValueError("waypoints must not repeat")
        ctrl = [a, a + dirs[i] * h, b - dirs[i + 1] * h, b]
        pieces.append(Polyline(bezier_points(ctrl, samples_per_segment)))
    return concat_polylines(pieces)


def concat_polylines(lines) -> Polyline:
    """Join polylines end to start, dropping duplicated junction points."""
    chunks = []
    for line in lines:
        pts = line.points
        if chunks and np.hypot(*(chunks[-1][-1] - pts[0])) <= 1e-6:
            pts = pts[1:]
        chunks.append(pts)
    return Polyline(np.concatenate(chunks))


def segments_intersect(p0, p1, q0, q1) -> np.ndarray:
    """Broadcasting closed segment-segment intersection test."""
    r = p1 - p0
    s = q1 - q0
    qp = q0 - p0
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    num_t = qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]
    num_u = qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]
    safe = np.where(denom == 0, 1.0, denom)
    t = num_t / safe
    u = num_u / safe
    return (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
