"""Seed-deterministic synthetic scenario generator.

Five road templates are laid out in a local frame, populated with an ego
vehicle, one interacting adversary and optional background traffic, then
rotated by a random global angle. Every vehicle follows a lane route at a
near-constant speed; placements are redrawn until the logged traffic is
collision-free with a safety margin.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Polyline, bezier_points, boxes_overlap, wrap_angles
from .scenario import (
    DEFAULT_DT,
    DEFAULT_HISTORY,
    DEFAULT_HORIZON,
    LaneSegment,
    Scenario,
    TrafficMap,
    Track,
    save_scenario,
)

log = logging.getLogger(__name__)

TEMPLATES = ("four_way_intersection", "t_junction", "straight_multilane", "curve", "merge")

# logged traffic keeps at least this much clearance (inflation of each box)
_MARGIN_LENGTH = 1.5
_MARGIN_WIDTH = 0.6
_MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class ForgeConfig:
    template: str
    seed: int = 0
    n_background_vehicles: int = 2
    speed_range: tuple[float, float] = (6.0, 13.0)

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; choose from {TEMPLATES}")
        if not 0 <= self.n_background_vehicles <= 6:
            raise ValueError("n_background_vehicles must be within 0..6")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must satisfy 0 < low <= high")


class _Road:
    """Lanes and boundaries under construction, in the template's local frame."""

    def __init__(self, lane_width: float):
        self.w = lane_width
        self.lanes: dict[str, tuple[np.ndarray, list[str]]] = {}
        self.boundaries: list[np.ndarray] = []

    def lane(self, lane_id, points, successors=()):
        self.lanes[lane_id] = (np.asarray(points, float), list(successors))

    def polyline(self, route) -> Polyline:
        chunks = []
        for lid in route:
            pts = self.lanes[lid][0]
            if chunks and np.hypot(*(chunks[-1][-1] - pts[0])) < 1e-6:
                pts = pts[1:]
            chunks.append(pts)
        return Polyline(np.concatenate(chunks))


@dataclass
class _Plan:
    """One vehicle: a lane route and a speed profile starting at t=0."""

    route: tuple[str, ...]
    s0: float
    v0: float
    accel: float = 0.0
    length: float = 4.6
    width: float = 1.9


def _segment(p0, p1, step=None) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    if step is None:
        return np.stack([p0, p1])
    n = max(2, int(math.ceil(np.hypot(*(p1 - p0)) / step)) + 1)
    return p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)


def _arc(center, radius, a0, a1, step=1.0) -> np.ndarray:
    n = max(3, int(math.ceil(abs(a1 - a0) * radius / step)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.asarray(center, float) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _rot90(v, sign=1.0):
    return np.array([-sign * v[1], sign * v[0]])


def _offset(points: np.ndarray, dist: float) -> np.ndarray:
    """Offset a polyline to its left by ``dist`` (negative for right)."""
    tang = np.gradient(points, axis=0)
    tang /= np.hypot(tang[:, 0], tang[:, 1])[:, None]
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return points + dist * normal


def _drive(path: Polyline, plan: _Plan, steps: int, dt: float) -> np.ndarray:
    t = np.arange(steps) * dt
    v = np.clip(plan.v0 + plan.accel * t, 0.5, 30.0)
    s = plan.s0 + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])
    xy = path.point_at(s, extrapolate=True)
    heading = path.heading_at(s)
    return np.column_stack([xy, heading, v, np.ones(steps)])


# ---------------------------------------------------------------- junctions

_DIRS = {"E": np.array([1.0, 0.0]), "N": np.array([0.0, 1.0]),
         "W": np.array([-1.0, 0.0]), "S": np.array([0.0, -1.0])}
# approach name -> direction of travel when entering the junction
_TRAVEL = {"S": _DIRS["N"], "N": _DIRS["S"], "W": _DIRS["E"], "E": _DIRS["W"]}


def _exit_name(vec) -> str:
    for name, d in _DIRS.items():
        if np.allclose(d, vec):
            return name
    raise AssertionError(vec)


def _junction(road: _Road, arms, half: float, arm_len: float, turns):
    """Lanes for a junction whose arms point in the ``arms`` directions.

    ``turns`` maps an approach name to the maneuvers allowed from it.
    """
    w = road.w
    for arm in arms:
        u = _DIRS[arm]
        f = -u  # inbound travel direction
        r = np.array([f[1], -f[0]])
        p_far = u * (half + arm_len) + r * (w / 2)
        p_stop = u * half + r * (w / 2)
        succ = [f"{arm}_{m}" for m in turns[arm]]
        road.lane(f"in_{arm}", _segment(p_far, p_stop), succ)
        # outbound lane on this arm travels along u, right side of u
        ru = np.array([u[1], -u[0]])
        road.lane(f"out_{arm}", _segment(u * half + ru * (w / 2), u * (half + arm_len) + ru * (w / 2)))
    for arm in arms:
        f = -_DIRS[arm]
        r = np.array([f[1], -f[0]])
        start = -f * half + r * (w / 2)
        for m in turns[arm]:
            if m == "straight":
                g = f
                pts = _segment(start, f * half + r * (w / 2), step=2.0)
            else:
                g = r if m == "right" else -r
                rg = np.array([g[1], -g[0]])
                end = g * half + rg * (w / 2)
                radius = half - w / 2 if m == "right" else half + w / 2
                center = start + (r if m == "right" else -r) * radius
                a0 = math.atan2(*(start - center)[::-1])
                a1 = math.atan2(*(end - center)[::-1])
                if m == "right":
                    while a1 > a0:
                        a1 -= 2 * math.pi
                else:
                    while a1 < a0:
                        a1 += 2 * math.pi
                pts = _arc(center, radius, a0, a1)
                pts[0], pts[-1] = start, end
            road.lane(f"{arm}_{m}", pts, [f"out_{_exit_name(g)}"])


def _junction_boundaries(road: _Road, arms, half, arm_len):
    w = road.w
    order = ["E", "N", "W", "S"]
    for arm in arms:
        u = _DIRS[arm]
        for side in (1.0, -1.0):
            v = _rot90(u, side)
            road.boundaries.append(_segment(u * half + v * w, u * (half + arm_len) + v * w))
    for i, a in enumerate(order):
        b = order[(i + 1) % 4]
        if a in arms and b in arms:
            ua, ub = _DIRS[a], _DIRS[b]
            center = ua * half + ub * half
            radius = half - w
            p0 = ua * half + ub * w
            a0 = math.atan2(*(p0 - center)[::-1])
            road.boundaries.append(_arc(center, radius, a0, a0 - math.pi / 2))


def _conflict_arcs(pa: Polyline, pb: Polyline):
    """Arc positions where two routes come closest."""
    sa = np.arange(0.0, pa.length, 0.5)
    sb = np.arange(0.0, pb.length, 0.5)
    xa, xb = pa.point_at(sa), pb.point_at(sb)
    d = np.hypot(xa[:, None, 0] - xb[None, :, 0], xa[:, None, 1] - xb[None, :, 1])
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return float(sa[i]), float(sb[j]), float(d[i, j])


def _timed_plan(route, path: Polyline, s_target, t_target, v, rng, length, width) -> _Plan:
    return _Plan(tuple(route), s_target - v * t_target, v, float(rng.uniform(-0.2, 0.2)), length, width)


def _dims(rng):
    length = float(rng.uniform(4.2, 5.0))
    return length, float(rng.uniform(1.8, 2.0))


def _intersection_scene(rng, cfg, tjunction: bool):
    w = float(rng.uniform(3.3, 3.8))
    half, arm_len = 12.0, 90.0
    road = _Road(w)
    if tjunction:
        arms = ("S", "W", "E")
        turns = {"S": ("left", "right"), "W": ("straight", "right"), "E": ("straight", "left")}
    else:
        arms = ("S", "N", "W", "E")
        turns = {a: ("straight", "left", "right") for a in arms}
    _junction(road, arms, half, arm_len, turns)
    if tjunction:
        for arm, side in (("S", 1.0), ("S", -1.0)):
            u = _DIRS[arm]
            road.boundaries.append(_segment(u * half + _rot90(u, side) * w, u * (half + arm_len) + _rot90(u, side) * w))
        for arm in ("W", "E"):
            u = _DIRS[arm]
            road.boundaries.append(_segment(u * half + np.array([0.0, -w]), u * (half + arm_len) + np.array([0.0, -w])))
        road.boundaries.append(_segment((-(half + arm_len), w), (half + arm_len, w)))
        for a, b in (("S", "E"), ("W", "S")):
            ua, ub = _DIRS[a], _DIRS[b]
            center = ua * half + ub * half
            p0 = ua * half + ub * w
            a0 = math.atan2(*(p0 - center)[::-1])
            road.boundaries.append(_arc(center, half - w, a0, a0 - math.pi / 2))
    else:
        _junction_boundaries(road, arms, half, arm_len)

    lo, hi = cfg.speed_range

    def route_for(approach, maneuver):
        return (f"in_{approach}", f"{approach}_{maneuver}",
                f"out_{_exit_name(_turned(approach, maneuver))}")

    def speed_for(maneuver):
        return float(rng.uniform(lo, hi)) if maneuver == "straight" else float(rng.uniform(lo, min(hi, 8.5)))

    ego_approach = "S" if not tjunction or rng.random() < 0.5 else "W"
    ego_man = str(rng.choice(turns[ego_approach]))
    others = [a for a in arms if a != ego_approach]
    adv_approach = str(rng.choice(others))
    adv_man = str(rng.choice(turns[adv_approach]))

    ego_route = route_for(ego_approach, ego_man)
    adv_route = route_for(adv_approach, adv_man)
    ego_path, adv_path = road.polyline(ego_route), road.polyline(adv_route)
    s_e, s_a, _ = _conflict_arcs(ego_path, adv_path)
    t_e = 1.0 + float(rng.uniform(2.0, 4.5))
    t_a = t_e + float(rng.choice([-1.0, 1.0])) * float(rng.uniform(1.6, 3.0))
    t_a = max(t_a, 1.5)
    v_e, v_a = speed_for(ego_man), speed_for(adv_man)
    ego = _timed_plan(ego_route, ego_path, s_e, t_e, v_e, rng, *_dims(rng))
    adv = _timed_plan(adv_route, adv_path, s_a, t_a, v_a, rng, *_dims(rng))

    def background():
        approach = str(rng.choice(arms))
        man = str(rng.choice(turns[approach]))
        route = route_for(approach, man)
        path = road.polyline(route)
        v = speed_for(man)
        s0 = float(rng.uniform(0.0, max(1.0, path.length - v * 9.0 - 5.0)))
        return _Plan(route, s0, v, float(rng.uniform(-0.2, 0.2)), *_dims(rng))

    return road, ego, adv, background, {"ego": f"{ego_approach}_{ego_man}", "adversary": f"{adv_approach}_{adv_man}"}


def _turned(approach, maneuver):
    f = _TRAVEL[approach]
    if maneuver == "straight":
        return f
    r = np.array([f[1], -f[0]])
    return r if maneuver == "right" else -r


# ------------------------------------------------------------- linear roads

def _multilane_scene(rng, cfg):
    w = float(rng.uniform(3.3, 3.8))
    n = int(rng.integers(2, 4))
    total = 320.0
    road = _Road(w)
    for i in range(n):
        road.lane(f"lane_{i}", _segment((0.0, i * w), (total, i * w)))
    road.boundaries.append(_segment((0.0, -w / 2), (total, -w / 2)))
    road.boundaries.append(_segment((0.0, (n - 0.5) * w), (total, (n - 0.5) * w)))
    lo, hi = cfg.speed_range
    lanes = [f"lane_{i}" for i in range(n)]
    ego_lane = int(rng.integers(n))
    v_e = float(rng.uniform(max(lo, 6.0), hi))
    ego = _Plan((lanes[ego_lane],), float(rng.uniform(30.0, 60.0)), v_e, float(rng.uniform(-0.2, 0.2)), *_dims(rng))
    variant = str(rng.choice(["cut_in", "lead", "follow"]))
    if variant == "cut_in":
        adj = [i for i in (ego_lane - 1, ego_lane + 1) if 0 <= i < n]
        lane = int(rng.choice(adj))
        adv = _Plan((lanes[lane],), ego.s0 + float(rng.uniform(-8.0, 14.0)),
                    max(lo, v_e + float(rng.uniform(-2.0, 2.0))), 0.0, *_dims(rng))
    elif variant == "lead":
        adv = _Plan((lanes[ego_lane],), ego.s0 + float(rng.uniform(14.0, 28.0)),
                    v_e + float(rng.uniform(-0.5, 1.5)), 0.0, *_dims(rng))
    else:
        adv = _Plan((lanes[ego_lane],), ego.s0 - float(rng.uniform(14.0, 26.0)),
                    v_e + float(rng.uniform(-1.0, 1.0)), 0.0, *_dims(rng))

    def background():
        lane = lanes[int(rng.integers(n))]
        return _Plan((lane,), float(rng.uniform(5.0, 200.0)), float(rng.uniform(lo, hi)),
                     float(rng.uniform(-0.2, 0.2)), *_dims(rng))

    return road, ego, adv, background, {"lanes": n, "variant": variant}


def _curve_scene(rng, cfg):
    w = float(rng.uniform(3.3, 3.8))
    radius = float(rng.uniform(30.0, 60.0))
    sweep = math.radians(float(rng.uniform(60.0, 110.0)))
    lead_in, lead_out = 70.0, 110.0
    bend = _arc((0.0, radius), radius, -math.pi / 2, -math.pi / 2 + sweep)
    end = bend[-1]
    end_dir = np.array([math.cos(sweep), math.sin(sweep)])
    ref = np.concatenate([
        _segment((-lead_in, 0.0), (0.0, 0.0), step=2.0)[:-1],
        bend[:-1],
        _segment(end, end + lead_out * end_dir, step=2.0),
    ])
    ref = Polyline(ref).resample(1.0).points
    road = _Road(w)
    # two lanes travel along the reference line, one lane comes the other way
    road.lane("fwd_0", _offset(ref, -w / 2))
    road.lane("fwd_1", _offset(ref, w / 2))
    road.lane("back_0", _offset(ref, 1.5 * w)[::-1])
    road.boundaries.append(_offset(ref, -w))
    road.boundaries.append(_offset(ref, 2.0 * w))
    lo, hi = cfg.speed_range
    ego_lane = str(rng.choice(["fwd_0", "fwd_1"]))
    other_lane = "fwd_1" if ego_lane == "fwd_0" else "fwd_0"
    v_e = float(rng.uniform(max(lo, 6.0), hi))
    ego = _Plan((ego_lane,), float(rng.uniform(20.0, 50.0)), v_e, float(rng.uniform(-0.2, 0.2)), *_dims(rng))
    variant = str(rng.choice(["cut_in", "lead", "follow"]))
    if variant == "cut_in":
        adv = _Plan((other_lane,), ego.s0 + float(rng.uniform(-8.0, 14.0)),
                    max(lo, v_e + float(rng.uniform(-2.0, 2.0))), 0.0, *_dims(rng))
    elif variant == "lead":
        adv = _Plan((ego_lane,), ego.s0 + float(rng.uniform(14.0, 28.0)),
                    v_e + float(rng.uniform(-0.5, 1.5)), 0.0, *_dims(rng))
    else:
        adv = _Plan((ego_lane,), max(0.0, ego.s0 - float(rng.uniform(14.0, 26.0))),
                    v_e + float(rng.uniform(-1.0, 1.0)), 0.0, *_dims(rng))

    def background():
        lane = str(rng.choice(["fwd_0", "fwd_1", "back_0", "back_0"]))
        return _Plan((lane,), float(rng.uniform(0.0, 120.0)), float(rng.uniform(lo, hi)),
                     float(rng.uniform(-0.2, 0.2)), *_dims(rng))

    return road, ego, adv, background, {"radius": radius, "variant": variant}


def _merge_scene(rng, cfg):
    w = float(rng.uniform(3.3, 3.8))
    theta = math.radians(float(rng.uniform(6.0, 12.0)))
    up, down, ramp_len = 150.0, 200.0, 110.0
    road = _Road(w)
    road.lane("main_in_0", _segment((-up, 0.0), (0.0, 0.0)), ["main_out_0"])
    road.lane("main_in_1", _segment((-up, w), (0.0, w)), ["main_out_1"])
    road.lane("main_out_0", _segment((0.0, 0.0), (down, 0.0)))
    road.lane("main_out_1", _segment((0.0, w), (down, w)))
    d = np.array([math.cos(theta), math.sin(theta)])
    p1 = np.array([-30.0, -30.0 * math.tan(theta)])
    start = p1 - ramp_len * d
    blend = bezier_points([p1, p1 + 12.0 * d, (-12.0, 0.0), (0.0, 0.0)], 31)
    ramp = np.concatenate([_segment(start, p1, step=2.0)[:-1], blend])
    road.lane("ramp", ramp, ["main_out_0"])
    road.boundaries.append(_segment((-up, 1.5 * w), (down, 1.5 * w)))
    left = _offset(ramp, w / 2)
    right = _offset(ramp, -w / 2)
    cut_l = int(np.argmax(left[:, 1] >= -w / 2))
    gore = np.array([left[cut_l, 0], -w / 2])
    road.boundaries.append(np.vstack([left[:cut_l], gore]))
    road.boundaries.append(_segment((-up, -w / 2), gore))
    cut_r = int(np.argmax(right[:, 1] >= -w / 2))
    road.boundaries.append(np.vstack([right[:cut_r], [right[cut_r, 0], -w / 2], [down, -w / 2]]))

    lo, hi = cfg.speed_range
    ego_on_ramp = rng.random() < 0.4
    ego_route = ("ramp", "main_out_0") if ego_on_ramp else ("main_in_0", "main_out_0")
    adv_route = ("main_in_0", "main_out_0") if ego_on_ramp else ("ramp", "main_out_0")
    ego_path, adv_path = road.polyline(ego_route), road.polyline(adv_route)
    s_e, s_a, _ = _conflict_arcs(ego_path, adv_path)
    # the routes share their tail; time both against the merge point
    s_e = float(ego_path.project_many([[0.0, 0.0]])[0][0])
    s_a = float(adv_path.project_many([[0.0, 0.0]])[0][0])
    v_e = float(rng.uniform(max(lo, 7.0), hi))
    v_a = float(np.clip(v_e + rng.uniform(-2.0, 2.0), lo, hi))
    t_e = 1.0 + float(rng.uniform(2.0, 5.0))
    t_a = t_e + float(rng.choice([-1.0, 1.0])) * float(rng.uniform(1.8, 3.0))
    ego = _timed_plan(ego_route, ego_path, s_e, t_e, v_e, rng, *_dims(rng))
    adv = _Plan(tuple(adv_route), s_a - v_a * t_a, v_a, 0.0, *_dims(rng))

    def background():
        route = [("main_in_1", "main_out_1"), ("main_in_0", "main_out_0"), ("ramp", "main_out_0")][
            int(rng.choice([0, 0, 1, 2]))
        ]
        path = road.polyline(route)
        v = float(rng.uniform(lo, hi))
        return _Plan(route, float(rng.uniform(0.0, max(1.0, path.length - v * 9.0 - 5.0))), v,
                     float(rng.uniform(-0.2, 0.2)), *_dims(rng))

    return road, ego, adv, background, {"ego_on_ramp": bool(ego_on_ramp)}


_BUILDERS = {
    "four_way_intersection": lambda rng, cfg: _intersection_scene(rng, cfg, tjunction=False),
    "t_junction": lambda rng, cfg: _intersection_scene(rng, cfg, tjunction=True),
    "straight_multilane": _multilane_scene,
    "curve": _curve_scene,
    "merge": _merge_scene,
}


# ------------------------------------------------------------------ assembly

def _clear(a: np.ndarray, da, b: np.ndarray, db) -> bool:
    hit = boxes_overlap(
        a[:, 0], a[:, 1], a[:, 2], da[0] + _MARGIN_LENGTH, da[1] + _MARGIN_WIDTH,
        b[:, 0], b[:, 1], b[:, 2], db[0] + _MARGIN_LENGTH, db[1] + _MARGIN_WIDTH,
    )
    return not hit.any()


def _route_arc_ok(path: Polyline, states: np.ndarray, history: int) -> bool:
    arcs, offs = path.project_many(states[history - 1:, :2])
    return arcs[-1] - arcs[0] >= 40.0 and np.all(np.abs(offs) < 0.5)


def forge_scenario(cfg: ForgeConfig) -> Scenario:
    """Build one scenario; the same config always yields the same scenario."""
    rng = np.random.default_rng([cfg.seed, TEMPLATES.index(cfg.template)])
    steps, history, dt = DEFAULT_HORIZON, DEFAULT_HISTORY, DEFAULT_DT
    for _ in range(_MAX_ATTEMPTS):
        road, ego, adv, background, meta = _BUILDERS[cfg.template](rng, cfg)
        paths = {}

        def states_for(plan):
            key = plan.route
            if key not in paths:
                paths[key] = road.polyline(plan.route)
            return _drive(paths[key], plan, steps, dt)

        if ego.s0 < 0 or adv.s0 < 0:
            continue
        ego_states, adv_states = states_for(ego), states_for(adv)
        if not _route_arc_ok(paths[ego.route], ego_states, history):
            continue
        if not _clear(ego_states, (ego.length, ego.width), adv_states, (adv.length, adv.width)):
            continue
        placed = [(ego_states, (ego.length, ego.width)), (adv_states, (adv.length, adv.width))]
        bg = []
        for _ in range(cfg.n_background_vehicles):
            for _ in range(_MAX_ATTEMPTS):
                plan = background()
                if plan.s0 < 0:
                    continue
                st = states_for(plan)
                if all(_clear(st, (plan.length, plan.width), o, d) for o, d in placed):
                    placed.append((st, (plan.length, plan.width)))
                    bg.append((plan, st))
                    break
            else:
                break
        if len(bg) != cfg.n_background_vehicles:
            continue
        break
    else:
        raise RuntimeError(f"could not place traffic for {cfg}")

    angle = float(rng.uniform(-math.pi, math.pi))
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])

    def turn_points(pts):
        return np.asarray(pts, float) @ rot.T

    def turn_states(st):
        out = st.copy()
        out[:, :2] = turn_points(st[:, :2])
        out[:, 2] = wrap_angles(st[:, 2] + angle)
        return out

    lanes = tuple(
        LaneSegment(lid, Polyline(turn_points(pts)), road.w, tuple(succ))
        for lid, (pts, succ) in road.lanes.items()
    )
    boundaries = tuple(Polyline(turn_points(b)) for b in road.boundaries)
    tracks = [
        Track("ego", ego.length, ego.width, turn_states(ego_states)),
        Track("adversary", adv.length, adv.width, turn_states(adv_states)),
    ]
    for i, (plan, st) in enumerate(bg):
        tracks.append(Track(f"bg_{i}", plan.length, plan.width, turn_states(st)))
    ego_final = tracks[0].states[-1]
    meta = {k: (float(v) if isinstance(v, float) else v) for k, v in meta.items()}
    return Scenario(
        map=TrafficMap(lanes, boundaries),
        tracks=tuple(tracks),
        ego_id="ego",
        adversary_id="adversary",
        ego_route=_trim_route(road, ego),
        destination=(float(ego_final[0]), float(ego_final[1])),
        dt=dt,
        horizon_steps=steps,
        history_steps=history,
        extras={"forge": {"template": cfg.template, "seed": int(cfg.seed), **meta}},
    )


def _trim_route(road: _Road, plan: _Plan) -> tuple[str, ...]:
    return tuple(plan.route)


def corpus_configs(n: int, seed: int = 0, templates=TEMPLATES) -> list[ForgeConfig]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(
            ForgeConfig(
                template=templates[i % len(templates)],
                seed=int(rng.integers(2**31)),
                n_background_vehicles=int(rng.integers(0, 4)),
            )
        )
    return out


def forge_corpus(n: int, train_fraction: float = 0.8, seed: int = 0):
    """Forge ``n`` scenarios and split them into disjoint train and test lists.

    Returns ``(train, test)``; each item is a ``(name, Scenario)`` pair.
    """
    if n < 2:
        raise ValueError("a corpus needs at least two scenarios")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    cfgs = corpus_configs(n, seed)
    scenes = [(f"scene_{i:04d}", forge_scenario(c)) for i, c in enumerate(cfgs)]
    order = np.random.default_rng([seed, n]).permutation(n)
    n_train = min(n - 1, max(1, int(round(n * train_fraction))))
    train = [scenes[i] for i in sorted(order[:n_train])]
    test = [scenes[i] for i in sorted(order[n_train:])]
    return train, test


def write_corpus(out_dir, n: int, train_fraction: float = 0.8, seed: int = 0) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = forge_corpus(n, train_fraction, seed)
    for name, sc in train + test:
        save_scenario(sc, out / f"{name}.json")
    manifest = {
        "seed": seed,
        "n": n,
        "train_fraction": train_fraction,
        "train": [f"{name}.json" for name, _ in train],
        "test": [f"{name}.json" for name, _ in test],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    log.info("wrote %d scenarios to %s", n, out)
    return manifest
