"""Episodic 2D driving environment.

The ego vehicle follows a kinematic bicycle model; every other vehicle replays
its recorded states (the adversary replays its override). Observations are an
ego block, two navigation checkpoints and a 72-ray lidar. The reward is route
progress minus crash and out-of-road penalties.

``BatchSimulator`` runs several egos through the same scenario at once; the
replayed traffic does not react to the ego, so the world is shared and only
the ego state is per-environment. ``Simulator`` is the single-environment
wrapper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import boxes_overlap, segments_intersect, wrap_angles
from .scenario import HEADING, SPEED, VALID, X, Y, AdversarialScenario, identity_adversary

N_RAYS = 72
LIDAR_RANGE = 50.0
SPEED_SCALE = 30.0
CHECKPOINT_SPACING = 10.0
ARRIVAL_RADIUS = 5.0
OBS_DIM = 4 + 4 + N_RAYS


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleLimits:
    max_steer: float = 0.6
    max_accel: float = 4.0
    max_brake: float = 8.0
    wheelbase: float = 2.8

    def __post_init__(self):
        if min(self.max_steer, self.max_accel, self.max_brake, self.wheelbase) <= 0:
            raise ValueError("vehicle limits must be positive")


@dataclass(frozen=True)
class RewardConfig:
    eta_crash: float = 1.0
    out_of_road_penalty: float = 10.0

    def __post_init__(self):
        if self.eta_crash < 0 or self.out_of_road_penalty < 0:
            raise ValueError("penalties must be nonnegative")


@dataclass
class EpisodeResult:
    route_completion: float
    crashed: bool
    out_of_road: bool
    arrived: bool
    steps: int
    episode_return: float
    trajectory: np.ndarray  # (future_steps, 5); after termination the final pose is held with valid = 0
    log_prob_sum: float = 0.0
    crash_with: str | None = None
    adversary_id: str | None = field(default=None, repr=False)

    @property
    def adversary_crash(self) -> bool:
        return self.crash_with is not None and self.crash_with == self.adversary_id

    def to_dict(self) -> dict:
        return {
            "route_completion": self.route_completion,
            "crashed": self.crashed,
            "out_of_road": self.out_of_road,
            "arrived": self.arrived,
            "steps": self.steps,
            "return": self.episode_return,
            "log_prob_sum": self.log_prob_sum,
            "crash_with": self.crash_with,
        }


def bicycle_step(x, y, heading, speed, a1, a2, dt: float, limits: VehicleLimits):
    """Advance bicycle-model states by one step under constant controls.

    Speed changes at constant acceleration and stops at zero; the vehicle
    moves along a circular arc of curvature ``tan(steer) / wheelbase`` whose
    length is the distance covered during the step.
    """
    a1 = np.clip(a1, -1.0, 1.0)
    a2 = np.clip(a2, -1.0, 1.0)
    steer = limits.max_steer * a1
    accel = limits.max_accel * np.maximum(0.0, a2) - limits.max_brake * np.maximum(0.0, -a2)
    v_new = np.maximum(0.0, speed + accel * dt)
    stops = speed + accel * dt < 0.0
    t_move = np.where(stops, speed / np.where(stops, -accel, 1.0), dt)
    ds = np.where(stops, 0.5 * speed * t_move, 0.5 * (speed + v_new) * dt)
    curvature = np.tan(steer) / limits.wheelbase
    dtheta = curvature * ds
    chord = ds * np.sinc(dtheta / (2.0 * np.pi))  # np.sinc is sin(pi x) / (pi x)
    mid = heading + 0.5 * dtheta
    return (
        x + chord * np.cos(mid),
        y + chord * np.sin(mid),
        wrap_angles(heading + dtheta),
        v_new,
    )


def actions_from_accel(accel, steer, limits: VehicleLimits):
    """Normalized action for a desired acceleration and steering angle."""
    accel = np.asarray(accel, float)
    a2 = np.where(accel >= 0, accel / limits.max_accel, accel / limits.max_brake)
    a1 = np.asarray(steer, float) / limits.max_steer
    return np.clip(a1, -1, 1), np.clip(a2, -1, 1)


def replay_tracks(adv: AdversarialScenario) -> dict[str, np.ndarray]:
    """Recorded states of every non-ego vehicle as they will be replayed.

    A background vehicle whose box the adversary's override reaches is frozen
    in place (speed 0) from the step before the first overlap, so the
    adversary never drives through replayed traffic.
    """
    s = adv.base
    adv_states = adv.adversary_states
    adv_dims = s.adversary.dims
    out = {}
    for t in s.tracks:
        if t.id == s.ego_id:
            continue
        if t.id == s.adversary_id:
            out[t.id] = adv_states
            continue
        st = t.states
        h = s.history_steps
        hit = boxes_overlap(
            adv_states[h:, X], adv_states[h:, Y], adv_states[h:, HEADING], adv_dims[0], adv_dims[1],
            st[h:, X], st[h:, Y], st[h:, HEADING], t.length, t.width,
        )
        hit &= (adv_states[h:, VALID] > 0.5) & (st[h:, VALID] > 0.5)
        if hit.any():
            k = h + int(np.argmax(hit))
            st = st.copy()
            st[k:] = st[k - 1]
            st[k:, SPEED] = 0.0
            st.setflags(write=False)
        out[t.id] = st
    return out


def _boundary_segments(adv: AdversarialScenario) -> np.ndarray:
    segs = [np.stack([b.points[:-1], b.points[1:]], axis=1) for b in adv.base.map.boundaries]
    return np.concatenate(segs) if segs else np.zeros((0, 2, 2))


@numba.njit(cache=True)
def _ray_kernel(origins, angles, segments, max_range):
    n, r = angles.shape
    out = np.full((n, r), max_range)
    for b in range(n):
        ox, oy = origins[b, 0], origins[b, 1]
        for k in range(r):
            rx, ry = math.cos(angles[b, k]), math.sin(angles[b, k])
            best = max_range
            for j in range(segments.shape[0]):
                ax, ay = segments[j, 0, 0], segments[j, 0, 1]
                sx, sy = segments[j, 1, 0] - ax, segments[j, 1, 1] - ay
                denom = rx * sy - ry * sx
                if abs(denom) < 1e-12:
                    continue
                qx, qy = ax - ox, ay - oy
                t = (qx * sy - qy * sx) / denom
                u = (qx * ry - qy * rx) / denom
                if t >= 0.0 and 0.0 <= u <= 1.0 and t < best:
                    best = t
            out[b, k] = best
    return out


def ray_distances(origins, angles, segments, max_range: float = LIDAR_RANGE) -> np.ndarray:
    """Distance along each ray to the nearest segment, capped at ``max_range``.

    ``origins`` is ``(B, 2)``, ``angles`` ``(B, R)``, ``segments`` ``(S, 2, 2)``.
    """
    return _ray_kernel(
        np.ascontiguousarray(origins, dtype=float),
        np.ascontiguousarray(angles, dtype=float),
        np.ascontiguousarray(segments, dtype=float).reshape(-1, 2, 2),
        float(max_range),
    )


def ray_distances_reference(origins, angles, segments, max_range: float = LIDAR_RANGE) -> np.ndarray:
    """Vectorized numpy version of ``ray_distances``, kept as a cross-check.

    ``origins`` is ``(B, 2)``, ``angles`` ``(B, R)``, ``segments`` ``(S, 2, 2)``.
    """
    origins = np.asarray(origins, float)
    angles = np.asarray(angles, float)
    out = np.full(angles.shape, max_range)
    if len(segments) == 0:
        return out
    rx, ry = np.cos(angles)[..., None], np.sin(angles)[..., None]
    a = segments[:, 0]
    sx, sy = (segments[:, 1] - a).T
    qx = a[None, :, 0] - origins[:, None, 0]
    qy = a[None, :, 1] - origins[:, None, 1]
    qx, qy = qx[:, None, :], qy[:, None, :]
    denom = rx * sy - ry * sx
    safe = np.where(np.abs(denom) < 1e-12, np.nan, denom)
    t = (qx * sy - qy * sx) / safe
    u = (qx * ry - qy * rx) / safe
    ok = (t >= 0) & (u >= 0) & (u <= 1)
    t = np.where(ok, t, np.inf)
    return np.minimum(out, t.min(axis=-1))


def box_edges(states: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Edges ``(4V, 2, 2)`` of vehicle boxes."""
    from .geometry import box_corners

    if len(states) == 0:
        return np.zeros((0, 2, 2))
    c = box_corners(states[:, X], states[:, Y], states[:, HEADING], dims[:, 0], dims[:, 1])
    return np.stack([c, np.roll(c, -1, axis=1)], axis=2).reshape(-1, 2, 2)


class BatchSimulator:
    """``n_envs`` egos driving the same adversarial scenario in lockstep."""

    def __init__(self, adv: AdversarialScenario, n_envs: int = 1, limits: VehicleLimits | None = None,
                 reward: RewardConfig | None = None):
        self.adv = adv
        self.scenario = s = adv.base
        self.n = int(n_envs)
        self.limits = limits or VehicleLimits()
        self.reward_cfg = reward or RewardConfig()
        self.dt = s.dt
        self.ego_dims = s.ego.dims
        tracks = replay_tracks(adv)
        self.other_ids = list(tracks)
        self.other_states = np.stack([tracks[i] for i in self.other_ids]) if tracks else np.zeros((0, s.horizon_steps, 5))
        self.other_dims = np.array([s.track(i).dims for i in self.other_ids]).reshape(-1, 2)
        self.boundaries = _boundary_segments(adv)
        self.route = s.route_polyline
        self.lane_width = min(s.map.lane(lid).lane_width for lid in s.ego_route)
        ego0 = s.ego.states[s.cutoff]
        self.d0 = float(self.route.project_many(ego0[None, :2])[0][0])
        self.destination = np.asarray(s.destination, float)
        self.d_end = float(self.route.project_many(self.destination[None])[0][0])
        self.route_length = max(self.d_end - self.d0, 1e-6)
        cps = list(np.arange(self.d0 + CHECKPOINT_SPACING, self.d_end, CHECKPOINT_SPACING))
        cps.append(self.d_end)
        self.checkpoint_arcs = np.array(cps)
        self.checkpoints = self.route.point_at(self.checkpoint_arcs)
        self.max_steps = s.future_steps
        self._ready = False

    # ------------------------------------------------------------- state
    def reset(self) -> np.ndarray:
        s = self.scenario
        ego0 = s.ego.states[s.cutoff]
        n = self.n
        self.t = s.cutoff
        self.x = np.full(n, ego0[X])
        self.y = np.full(n, ego0[Y])
        self.heading = np.full(n, ego0[HEADING])
        self.speed = np.full(n, max(0.0, ego0[SPEED]))
        self.last_action = np.zeros((n, 2))
        self.progress = np.full(n, self.d0)
        self.done = np.zeros(n, bool)
        self.crashed = np.zeros(n, bool)
        self.out_of_road = np.zeros(n, bool)
        self.arrived = np.zeros(n, bool)
        self.steps = np.zeros(n, int)
        self.returns = np.zeros(n)
        self.crash_with = [None] * n
        self.trajectory = np.zeros((n, self.max_steps, 5))
        self._ready = True
        return self.observe()

    def others_at(self, t: int):
        """States and dims of the replayed vehicles at step ``t`` (held past the end)."""
        t = min(t, self.other_states.shape[1] - 1)
        st = self.other_states[:, t]
        return st, self.other_dims

    def ego_states(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.heading, self.speed, np.ones(self.n)])

    # ------------------------------------------------------- observation
    def route_tangent(self, arcs) -> np.ndarray:
        return self.route.heading_at(arcs)

    def lidar(self) -> np.ndarray:
        others, dims = self.others_at(self.t)
        valid = others[:, VALID] > 0.5
        segs = np.concatenate([self.boundaries, box_edges(others[valid], dims[valid])])
        origins = np.column_stack([self.x, self.y])
        if len(segs):
            # drop segments that no ray can reach
            mid = segs.mean(axis=1)
            half = 0.5 * np.hypot(*(segs[:, 1] - segs[:, 0]).T)
            d = np.hypot(mid[None, :, 0] - origins[:, None, 0], mid[None, :, 1] - origins[:, None, 1])
            segs = segs[(d - half[None]).min(axis=0) <= LIDAR_RANGE]
        angles = self.heading[:, None] + 2.0 * np.pi * np.arange(N_RAYS)[None] / N_RAYS
        return ray_distances(origins, angles, segs) / LIDAR_RANGE

    def observe(self) -> np.ndarray:
        n = self.n
        obs = np.zeros((n, OBS_DIM))
        obs[:, 0] = np.clip(self.speed / SPEED_SCALE, 0.0, 1.0)
        obs[:, 1] = wrap_angles(self.heading - self.route_tangent(self.progress)) / np.pi
        obs[:, 2:4] = self.last_action
        idx = np.searchsorted(self.checkpoint_arcs, self.progress, side="right")
        last = len(self.checkpoint_arcs) - 1
        for slot, off in enumerate((0, 1)):
            cp = self.checkpoints[np.minimum(idx + off, last)]
            dx, dy = cp[:, 0] - self.x, cp[:, 1] - self.y
            obs[:, 4 + 2 * slot] = np.clip(np.hypot(dx, dy) / LIDAR_RANGE, 0.0, 1.0)
            obs[:, 5 + 2 * slot] = wrap_angles(np.arctan2(dy, dx) - self.heading) / np.pi
        obs[:, 8:] = self.lidar()
        return np.clip(obs, -1.0, 1.0)

    # -------------------------------------------------------------- step
    def step(self, actions=None, teleport=None):
        """Advance every live environment by one step.

        ``actions`` is ``(n, 2)`` in ``[-1, 1]``. ``teleport`` (``(n, >=4)``)
        instead places each ego at the given states, which is how recorded
        trajectories are replayed.
        """
        if not self._ready:
            raise SimulationError("call reset() before step()")
        if self.done.all():
            raise SimulationError("step() called after every episode finished")
        live = ~self.done
        prev_x, prev_y = self.x.copy(), self.y.copy()
        if teleport is not None:
            tp = np.asarray(teleport, float).reshape(self.n, -1)
            nx, ny, nh, nv = tp[:, X], tp[:, Y], wrap_angles(tp[:, HEADING]), np.maximum(tp[:, SPEED], 0.0)
            act = self.last_action
        else:
            act = np.clip(np.asarray(actions, float).reshape(self.n, 2), -1.0, 1.0)
            nx, ny, nh, nv = bicycle_step(self.x, self.y, self.heading, self.speed, act[:, 0], act[:, 1],
                                          self.dt, self.limits)
        self.x = np.where(live, nx, self.x)
        self.y = np.where(live, ny, self.y)
        self.heading = np.where(live, nh, self.heading)
        self.speed = np.where(live, nv, self.speed)
        self.last_action = np.where(live[:, None], act, self.last_action)
        self.t += 1

        # progress along the route
        arc, lateral = self.route.project_many(np.column_stack([self.x, self.y]))
        arc = np.minimum(arc, self.d_end)
        dist_dest = np.hypot(self.x - self.destination[0], self.y - self.destination[1])

        # collisions with replayed traffic
        others, dims = self.others_at(self.t)
        crash = np.zeros(self.n, bool)
        crash_idx = np.full(self.n, -1)
        if len(others):
            hit = boxes_overlap(
                self.x[:, None], self.y[:, None], self.heading[:, None], self.ego_dims[0], self.ego_dims[1],
                others[None, :, X], others[None, :, Y], others[None, :, HEADING], dims[None, :, 0], dims[None, :, 1],
            )
            hit &= others[None, :, VALID] > 0.5
            crash = hit.any(axis=1)
            crash_idx = np.where(crash, hit.argmax(axis=1), -1)

        # leaving the drivable area
        oor = np.abs(lateral) > self.lane_width
        if len(self.boundaries):
            p0 = np.stack([prev_x, prev_y], axis=1)[:, None]
            p1 = np.stack([self.x, self.y], axis=1)[:, None]
            crossed = segments_intersect(p0, p1, self.boundaries[None, :, 0], self.boundaries[None, :, 1])
            oor |= crossed.any(axis=1)

        crash &= live
        oor &= live
        arrive = live & ~crash & (dist_dest <= ARRIVAL_RADIUS)
        new_progress = np.where(arrive, self.d_end, arc)
        delta = np.where(live, new_progress - self.progress, 0.0)
        self.progress = np.where(live, new_progress, self.progress)
        rcfg = self.reward_cfg
        reward = delta - rcfg.eta_crash * crash - rcfg.out_of_road_penalty * oor
        reward = np.where(live, reward, 0.0)

        k = self.t - self.scenario.history_steps
        rows = np.column_stack([self.x, self.y, self.heading, self.speed, np.ones(self.n)])
        self.trajectory[live, k] = rows[live]
        self.steps[live] += 1
        self.returns += reward
        self.crashed |= crash
        self.out_of_road |= oor
        self.arrived |= arrive
        for i in np.flatnonzero(crash):
            self.crash_with[i] = self.other_ids[int(crash_idx[i])]
        timeout = live & (self.steps >= self.max_steps)
        finished = live & (crash | oor | arrive | timeout)
        # hold the final pose for the remaining slots, flagged invalid: the
        # ego has left the episode, so nothing can collide with it there
        for i in np.flatnonzero(finished):
            self.trajectory[i, k + 1:] = self.trajectory[i, k]
            self.trajectory[i, k + 1:, 4] = 0.0
        self.done |= finished
        info = {
            "crash": crash,
            "out_of_road": oor,
            "arrived": arrive,
            "delta_d": delta,
            "crash_with": [self.other_ids[int(j)] if j >= 0 and c else None for j, c in zip(crash_idx, crash)],
        }
        return self.observe(), reward, finished, info

    def route_completion(self) -> np.ndarray:
        return np.clip((self.progress - self.d0) / self.route_length, 0.0, 1.0)

    def results(self, log_prob_sums=None) -> list[EpisodeResult]:
        lps = np.zeros(self.n) if log_prob_sums is None else np.asarray(log_prob_sums, float)
        rc = self.route_completion()
        return [
            EpisodeResult(
                route_completion=float(rc[i]),
                crashed=bool(self.crashed[i]),
                out_of_road=bool(self.out_of_road[i]),
                arrived=bool(self.arrived[i] and not self.crashed[i]),
                steps=int(self.steps[i]),
                episode_return=float(self.returns[i]),
                trajectory=self.trajectory[i].copy(),
                log_prob_sum=float(lps[i]),
                crash_with=self.crash_with[i],
                adversary_id=self.scenario.adversary_id,
            )
            for i in range(self.n)
        ]


class Simulator:
    """One ego in one scenario; a thin wrapper over ``BatchSimulator``."""

    def __init__(self, adv: AdversarialScenario, limits: VehicleLimits | None = None,
                 reward: RewardConfig | None = None):
        self._batch = BatchSimulator(adv, 1, limits, reward)
        self._done = True
        self._started = False

    @property
    def batch(self) -> BatchSimulator:
        return self._batch

    def reset(self) -> np.ndarray:
        self._done = False
        self._started = True
        return self._batch.reset()[0]

    def step(self, action=None, teleport=None):
        if not self._started:
            raise SimulationError("call reset() before step()")
        if self._done:
            raise SimulationError("step() called after the episode finished; call reset()")
        obs, reward, done, info = self._batch.step(
            None if action is None else np.asarray(action, float)[None],
            None if teleport is None else np.asarray(teleport, float)[None],
        )
        self._done = bool(done[0])
        info1 = {k: (v[0] if not isinstance(v, list) else v[0]) for k, v in info.items()}
        info1 = {k: (bool(v) if isinstance(v, np.bool_) else v) for k, v in info1.items()}
        info1["delta_d"] = float(info1["delta_d"])
        return obs[0], float(reward[0]), self._done, info1

    def result(self, log_prob_sum: float = 0.0) -> EpisodeResult:
        return self._batch.results([log_prob_sum])[0]


def lidar_scan(sim: BatchSimulator) -> np.ndarray:
    """Normalized lidar ranges for every environment of ``sim`` at its current step."""
    return sim.lidar()


def raw_simulator(scenario, **kw) -> Simulator:
    return Simulator(identity_adversary(scenario), **kw)
