"""Goal-based kinematic traffic prior.

Goals are sampled on the lane graph within the distance a vehicle can cover
over the prediction horizon. Each goal gets a hand-set score, the scores are
turned into probabilities by a softmax, and each goal is connected to the
vehicle's current pose by a smoothed path driven with a trapezoidal speed
profile.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .geometry import Polyline, bezier_points, wrap_angle, wrap_angles
from .scenario import HEADING, SPEED, STATE_KEYS, VALID, X, Y, HistoryView

MAX_ACCEL = 6.0
MAX_LAT_ACCEL = 8.0
RENORM_TOLERANCE = 1e-3


class PredictionError(ValueError):
    pass


class FeasibilityError(PredictionError):
    def __init__(self, message: str, candidate: int, step: int):
        super().__init__(message)
        self.candidate = candidate
        self.step = step


@dataclass(frozen=True)
class PredictorConfig:
    m: int = 32
    temperature: float = 1.0
    # score weights: heading misalignment, lateral offset, required speed change
    weights: tuple[float, float, float] = (1.0, 0.5, 0.2)
    max_accel: float = MAX_ACCEL
    comfort_accel: float = 2.0
    max_speed: float = 25.0
    goal_spacing: float = 2.0
    nms_radius: float = 3.0
    max_heading_diff: float = math.radians(60.0)
    lane_search_width: float = 1.25  # in lane widths
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True, eq=False)
class TrajectoryCandidate:
    states: np.ndarray  # (K, 5) rows of x, y, heading, speed, valid
    probability: float
    goal: tuple[float, float] | None = None
    score: float = 0.0

    def __post_init__(self):
        arr = np.array(self.states, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "states", arr)


@dataclass(frozen=True, eq=False)
class CandidateSet:
    vehicle_id: str
    candidates: tuple[TrajectoryCandidate, ...]

    def __post_init__(self):
        total = sum(c.probability for c in self.candidates)
        if not self.candidates:
            raise PredictionError("a candidate set needs at least one candidate")
        if abs(total - 1.0) > 1e-9:
            raise PredictionError(f"candidate probabilities sum to {total!r}, not 1")

    def __len__(self):
        return len(self.candidates)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([c.probability for c in self.candidates])

    @property
    def trajectories(self) -> np.ndarray:
        return np.stack([c.states for c in self.candidates])


@dataclass
class Goal:
    point: np.ndarray
    score: float
    path: Polyline | None = field(default=None, repr=False)
    distance: float = 0.0  # arc-length along ``path`` from the vehicle
    lanes: tuple[str, ...] = ()
    start: tuple[float, float] = (0.0, 0.0)  # (arc, lateral offset) of the vehicle on ``path``


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(scores, dtype=float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def reach_bounds(v: float, horizon: float, accel: float, max_speed: float) -> tuple[float, float]:
    """Shortest and longest distance coverable in ``horizon`` seconds at bounded acceleration."""
    if v <= accel * horizon:
        d_min = v * v / (2.0 * accel)
    else:
        d_min = v * horizon - 0.5 * accel * horizon**2
    top = max(max_speed, v)
    t1 = min(horizon, max(0.0, (top - v) / accel))
    d_max = v * t1 + 0.5 * accel * t1**2 + (v + accel * t1) * (horizon - t1)
    return d_min, d_max


def _vehicle_state(x: HistoryView, vehicle_id: str) -> np.ndarray:
    if vehicle_id not in x.tracks:
        raise PredictionError(f"unknown vehicle {vehicle_id!r}")
    hist = x.tracks[vehicle_id]
    valid = hist[hist[:, VALID] > 0.5]
    if len(valid) < 2:
        raise PredictionError(f"vehicle {vehicle_id!r} has fewer than 2 valid history states")
    return valid[-1]


def _start_lanes(x: HistoryView, p, heading, cfg: PredictorConfig):
    out = []
    for lane in x.map.lanes:
        line = lane.centerline
        arc, off = line.project_many(p[None])
        arc, off = float(arc[0]), float(off[0])
        foot = line.point_at(arc)
        if math.hypot(*(p - foot)) > cfg.lane_search_width * lane.lane_width:
            continue
        if abs(wrap_angle(float(line.heading_at(arc)) - heading)) > cfg.max_heading_diff:
            continue
        out.append((lane, arc, off))
    return out


def _lane_paths(x: HistoryView, lane, arc: float, reach: float, max_depth: int = 8):
    """All lane sequences starting at ``lane`` long enough to cover ``reach`` (or dead ends)."""
    out = []
    stack = [((lane.id,), lane.centerline.length - arc)]
    while stack:
        ids, covered = stack.pop()
        last = x.map.lane(ids[-1])
        if covered >= reach or not last.successors or len(ids) >= max_depth:
            out.append(ids)
            continue
        for succ in reversed(last.successors):
            if succ in ids or succ not in x.map.lane_index:
                continue
            stack.append((ids + (succ,), covered + x.map.lane(succ).centerline.length))
    return sorted(out)


def _concat(x: HistoryView, ids) -> np.ndarray:
    chunks = []
    for lid in ids:
        pts = x.map.lane(lid).centerline.points
        if chunks and math.hypot(*(chunks[-1][-1] - pts[0])) <= 1e-6:
            pts = pts[1:]
        chunks.append(pts)
    return np.concatenate(chunks)


def _blend_path(p, heading, lane_pts: Polyline, arc0: float, blend: float, extend: float) -> Polyline:
    """Smoothed path from pose ``(p, heading)`` that joins ``lane_pts`` at ``arc0 + blend``."""
    join = arc0 + blend
    q = lane_pts.point_at(join, extrapolate=True)
    qh = float(lane_pts.heading_at(min(join, lane_pts.length)))
    hdir = np.array([math.cos(heading), math.sin(heading)])
    qdir = np.array([math.cos(qh), math.sin(qh)])
    n = max(4, int(math.ceil(blend)) + 1)
    curve = bezier_points([p, p + hdir * blend / 3.0, q - qdir * blend / 3.0, q], n)
    s_rest = np.arange(join + 1.0, lane_pts.length, 1.0)
    rest = lane_pts.point_at(s_rest) if len(s_rest) else np.empty((0, 2))
    end = lane_pts.points[-1] if join < lane_pts.length else q
    end_dir = lane_pts.segment_dirs[-1] if join < lane_pts.length else qdir
    tail = end + end_dir * np.arange(1.0, extend + 1.0, 2.0)[:, None]
    pts = np.concatenate([curve, rest, tail])
    keep = np.concatenate([[True], np.hypot(*np.diff(pts, axis=0).T) > 1e-3])
    return Polyline(pts[keep])


def _straight_path(p, heading, length: float) -> Polyline:
    d = np.array([math.cos(heading), math.sin(heading)])
    return Polyline(p + d * np.linspace(0.0, max(length, 1.0), 16)[:, None])


def propose_goals(x: HistoryView, vehicle_id: str, horizon_s: float | None = None,
                  cfg: PredictorConfig | None = None) -> list[Goal]:
    """Goals reachable by ``vehicle_id`` over the horizon, each with a score.

    Goals lie on lane centerlines reached through the lane graph; vehicles not
    on any lane get goals along their current heading instead.
    """
    cfg = cfg or PredictorConfig()
    last = _vehicle_state(x, vehicle_id)
    horizon = x.future_steps * x.dt if horizon_s is None else float(horizon_s)
    p = last[[X, Y]].astype(float)
    heading, v = float(last[HEADING]), max(0.0, float(last[SPEED]))
    d_min, d_max = reach_bounds(v, horizon, cfg.max_accel, cfg.max_speed)
    w1, w2, w3 = cfg.weights
    dists = np.arange(d_min, d_max + 1e-9, cfg.goal_spacing)
    if len(dists) == 0 or dists[-1] < d_max - 1e-9:
        dists = np.append(dists, d_max)

    def speed_term(d):
        return w3 * np.abs(d / horizon - v)

    goals = []
    starts = _start_lanes(x, p, heading, cfg)
    for lane, arc, off in starts:
        align = abs(wrap_angle(float(lane.centerline.heading_at(arc)) - heading))
        for ids in _lane_paths(x, lane, arc, d_max + 1.0):
            line = Polyline(_concat(x, ids))
            base = -(w1 * align + w2 * abs(off))
            avail = line.length - arc
            ok = dists[dists <= avail + 1e-9]
            if len(ok) == 0:
                continue
            # goal positions measured along the lanes from the projection point
            pts = line.point_at(arc + ok)
            for d, pt, sc in zip(ok, pts, base - speed_term(ok)):
                goals.append(Goal(pt, float(sc), line, float(d), ids, (arc, off)))
    if not starts:
        hdir = np.array([math.cos(heading), math.sin(heading)])
        for d in dists:
            goals.append(Goal(p + d * hdir, float(-speed_term(d)), distance=float(d)))
    return goals


def speed_profile(v0: float, distance: float, horizon: float, t: np.ndarray,
                  accel: float, max_accel: float = MAX_ACCEL):
    """Trapezoidal profile covering ``distance`` in ``horizon`` seconds.

    Constant acceleration (or braking) at the smallest magnitude in
    ``[accel, max_accel]`` that works, then constant speed; if the vehicle
    must stop short, it brakes uniformly to a standstill. Returns arc-length
    and speed at times ``t``, or ``None`` when no profile within the limits
    exists.
    """
    need = distance - v0 * horizon
    if abs(need) < 1e-9:
        return v0 * t, np.full_like(t, v0)
    for a in np.linspace(accel, max_accel, 9):
        sgn = 1.0 if need > 0 else -1.0
        a_s = sgn * a
        disc = horizon**2 - 2.0 * need / a_s
        if disc < 0:
            continue
        t1 = horizon - math.sqrt(disc)
        v1 = v0 + a_s * t1
        if v1 < 0:
            continue
        tt = np.minimum(t, t1)
        s = v0 * tt + 0.5 * a_s * tt**2 + v1 * np.maximum(t - t1, 0.0)
        v = np.where(t < t1, v0 + a_s * t, v1)
        return s, v
    # stop before the horizon ends
    if need < 0 and distance >= 0:
        if v0 <= 1e-9:
            return (np.zeros_like(t), np.zeros_like(t)) if distance <= 1e-9 else None
        if distance <= 1e-9:
            return None
        a_s = v0 * v0 / (2.0 * distance)
        if a_s > max_accel + 1e-9:
            return None
        t_stop = v0 / a_s
        tt = np.minimum(t, t_stop)
        return v0 * tt - 0.5 * a_s * tt**2, np.maximum(v0 - a_s * t, 0.0)
    return None


def check_feasible(states: np.ndarray, dt: float, first_speed: float | None = None) -> int | None:
    """Index of the first step whose implied acceleration or lateral acceleration is out of bounds.

    Longitudinal acceleration comes from consecutive speeds; lateral
    acceleration is yaw rate (finite-differenced heading) times speed. When
    ``first_speed`` is given, the step into the first state is checked too.
    """
    st = np.asarray(states, dtype=float)
    v = st[:, SPEED]
    if first_speed is not None:
        v = np.concatenate([[first_speed], v])
    acc = np.diff(v) / dt
    yaw = wrap_angles(np.diff(st[:, HEADING])) / dt
    lat = yaw * st[:-1, SPEED]
    offset = 0 if first_speed is None else 1
    bad_acc = np.flatnonzero(np.abs(acc) > MAX_ACCEL + 1e-6)
    bad_lat = np.flatnonzero(np.abs(lat) > MAX_LAT_ACCEL + 1e-6)
    first = []
    if len(bad_acc):
        first.append(int(bad_acc[0]) + 1 - offset)
    if len(bad_lat):
        first.append(int(bad_lat[0]) + 1)
    return min(first) if first else None


def _rollout_goal(goal: Goal, p, heading, v0, x: HistoryView, cfg: PredictorConfig, accel: float):
    k = x.future_steps
    horizon = k * x.dt
    t = np.arange(1, k + 1) * x.dt
    if goal.path is None:
        path = _straight_path(p, heading, goal.distance + 60.0)
        dist = goal.distance
    else:
        arc0, off = goal.start
        blend = float(np.clip(max(abs(off) * 7.0, 2.5 * v0), 1.0, 40.0))
        blend = min(blend, max(goal.distance, 1.0))
        path = _blend_path(p, heading, goal.path, arc0, blend, extend=80.0)
        # the goal is the lane point at ``arc0 + distance``; find it on the new path
        dist = goal.distance if goal.distance <= 1e-9 else float(
            path.project_many(goal.point[None])[0][0]
        )
    prof = speed_profile(v0, dist, horizon, t, cfg.comfort_accel if accel is None else accel, cfg.max_accel)
    if prof is None:
        return None
    s, v = prof
    xy = path.point_at(s, extrapolate=True)
    hd = path.smooth_heading_at(s) if dist > 1e-9 else np.full_like(s, heading)
    states = np.column_stack([xy, hd, v, np.ones(k)])
    if check_feasible(states, x.dt, first_speed=v0) is not None:
        return None
    if not np.all(np.isfinite(states)):
        return None
    return states


def generate_candidates(x: HistoryView, vehicle_id: str, m: int | None = None,
                        cfg: PredictorConfig | None = None) -> CandidateSet:
    """M trajectory candidates with softmax-of-score probabilities."""
    cfg = cfg or PredictorConfig()
    m = cfg.m if m is None else int(m)
    if m < 1:
        raise ValueError("m must be at least 1")
    rng = np.random.default_rng(cfg.seed)
    last = _vehicle_state(x, vehicle_id)
    p = last[[X, Y]].astype(float)
    heading, v0 = float(last[HEADING]), max(0.0, float(last[SPEED]))
    goals = propose_goals(x, vehicle_id, cfg=cfg)
    order = sorted(range(len(goals)), key=lambda i: (-goals[i].score, i))

    chosen: list[tuple[Goal, np.ndarray]] = []
    rejected: set[int] = set()

    def take(i):
        traj = _rollout_goal(goals[i], p, heading, v0, x, cfg, None)
        if traj is None:
            rejected.add(i)
            return False
        chosen.append((goals[i], traj))
        return True

    used: set[int] = set()
    r2 = cfg.nms_radius**2
    for i in order:
        if len(chosen) >= m:
            break
        g = goals[i]
        if any(np.sum((g.point - c.point) ** 2) < r2 for c, _ in chosen):
            continue
        if take(i):
            used.add(i)
    for i in order:
        if len(chosen) >= m:
            break
        if i in used or i in rejected:
            continue
        if any(np.array_equal(g.point, goals[i].point) and g.distance == goals[i].distance
               for g, _ in chosen):
            continue
        if take(i):
            used.add(i)
    # shortfall: copies of the best goals with other acceleration levels
    base = list(chosen) or [(Goal(p.copy(), 0.0, distance=0.0), None)]
    j = 0
    while len(chosen) < m:
        g, _ = base[j % len(base)]
        j += 1
        accel = float(rng.uniform(0.5, cfg.max_accel))
        traj = _rollout_goal(g, p, heading, v0, x, cfg, accel)
        if traj is None:
            traj = _hold_speed(p, heading, v0, x)
        chosen.append((g, traj))
        if j > 50 * m:
            raise PredictionError(f"could not build {m} candidates for {vehicle_id!r}")

    scores = np.array([g.score for g, _ in chosen])
    probs = softmax(scores, cfg.temperature)
    cands = tuple(
        TrajectoryCandidate(traj, float(pr), (float(g.point[0]), float(g.point[1])), float(g.score))
        for (g, traj), pr in zip(chosen, probs)
    )
    return CandidateSet(vehicle_id, _renormalized(cands))


def _hold_speed(p, heading, v0, x: HistoryView) -> np.ndarray:
    k = x.future_steps
    s = np.arange(1, k + 1) * x.dt * v0
    xy = p + s[:, None] * np.array([math.cos(heading), math.sin(heading)])
    return np.column_stack([xy, np.full(k, heading), np.full(k, v0), np.ones(k)])


def _renormalized(cands):
    probs = np.array([c.probability for c in cands])
    probs = probs / math.fsum(probs)
    # nudge the largest entry so the float sum is 1 to within rounding
    resid = 1.0 - math.fsum(probs)
    probs[int(np.argmax(probs))] += resid
    return tuple(TrajectoryCandidate(c.states, float(pr), c.goal, c.score) for c, pr in zip(cands, probs))


CANDIDATE_SCHEMA = {
    "type": "object",
    "required": ["vehicle_id", "candidates"],
    "properties": {
        "vehicle_id": {"type": "string"},
        "candidates": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["probability", "states"],
                "properties": {
                    "probability": {"type": "number", "minimum": 0},
                    "states": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["x", "y", "heading", "speed"],
                            "properties": {k: {"type": "number"} for k in ("x", "y", "heading", "speed")},
                        },
                    },
                },
            },
        },
    },
}


def candidates_from_dict(doc, dt: float = 0.1) -> CandidateSet:
    try:
        jsonschema.validate(doc, CANDIDATE_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path)
        raise PredictionError(f"candidate file violates schema at {where or '<root>'}: {err.message}") from None
    probs = np.array([c["probability"] for c in doc["candidates"]], dtype=float)
    total = math.fsum(probs)
    if abs(total - 1.0) > RENORM_TOLERANCE:
        raise PredictionError(f"candidate probabilities sum to {total:.6g}; allowed deviation is {RENORM_TOLERANCE}")
    cands = []
    for i, c in enumerate(doc["candidates"]):
        st = np.array([[s[k] for k in STATE_KEYS[:4]] + [1.0 if s.get("valid", True) else 0.0]
                       for s in c["states"]], dtype=float)
        bad = check_feasible(st, dt)
        if bad is not None:
            raise FeasibilityError(f"candidate {i} is kinematically infeasible at step {bad}", i, bad)
        cands.append(TrajectoryCandidate(st, float(c["probability"])))
    return CandidateSet(doc["vehicle_id"], _renormalized(cands))


def candidates_to_dict(cs: CandidateSet) -> dict:
    return {
        "vehicle_id": cs.vehicle_id,
        "candidates": [
            {
                "probability": c.probability,
                "states": [dict(zip(STATE_KEYS[:4], map(float, row[:4]))) for row in c.states],
            }
            for c in cs.candidates
        ],
    }


def load_external_candidates(path, dt: float = 0.1) -> CandidateSet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise PredictionError(f"{path}: not valid JSON ({err})") from None
    return candidates_from_dict(doc, dt)
