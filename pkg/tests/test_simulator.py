from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import LineString, Point

from catdrive.forge import TEMPLATES, ForgeConfig, forge_scenario
from catdrive.scenario import identity_adversary, scenario_from_dict
from catdrive.simulator import (
    N_RAYS,
    OBS_DIM,
    BatchSimulator,
    RewardConfig,
    SimulationError,
    Simulator,
    VehicleLimits,
    bicycle_step,
    lidar_scan,
    ray_distances,
    ray_distances_reference,
    raw_simulator,
    replay_tracks,
)
from conftest import minimal_doc, straight_states
from oracles import box_polygon

LIM = VehicleLimits()


def sim_for(doc) -> Simulator:
    return raw_simulator(scenario_from_dict(doc))


def parked(x, y=0.0, heading=0.0):
    return [{"x": x, "y": y, "heading": heading, "speed": 0.0, "valid": True} for _ in range(91)]


# ------------------------------------------------------------------ dynamics

def test_limits_validation():
    with pytest.raises(ValueError):
        VehicleLimits(max_steer=0.0)
    with pytest.raises(ValueError):
        RewardConfig(eta_crash=-1.0)


def test_straight_full_throttle_step():
    x, y, h, v = bicycle_step(0.0, 0.0, 0.0, 10.0, 0.0, 1.0, 0.1, LIM)
    assert float(x) == pytest.approx((10 + 0.5 * 4 * 0.1) * 0.1)  # 1.02 m
    assert float(v) == pytest.approx(10.4)
    assert float(y) == 0.0 and float(h) == 0.0


def _fine_euler(x, y, h, v, a1, a2, dt, lim, n=20000):
    steer = lim.max_steer * a1
    acc = lim.max_accel * max(0.0, a2) - lim.max_brake * max(0.0, -a2)
    step = dt / n
    for _ in range(n):
        vm = max(0.0, v + 0.5 * acc * step)
        x += vm * math.cos(h + 0.5 * vm * math.tan(steer) / lim.wheelbase * step) * step
        y += vm * math.sin(h + 0.5 * vm * math.tan(steer) / lim.wheelbase * step) * step
        h += vm * math.tan(steer) / lim.wheelbase * step
        v = max(0.0, v + acc * step)
    return x, y, math.atan2(math.sin(h), math.cos(h)), v


@pytest.mark.parametrize("state,action", [
    ((0.0, 0.0, 0.3, 8.0), (0.7, 0.5)),
    ((5.0, -2.0, -2.0, 15.0), (-1.0, -0.3)),
    ((0.0, 0.0, 3.1, 0.5), (0.4, -1.0)),  # stops inside the step
    ((1.0, 1.0, 0.0, 0.0), (1.0, 1.0)),
])
def test_bicycle_matches_fine_integration(state, action):
    got = bicycle_step(*state, *action, 0.1, LIM)
    ref = _fine_euler(*state, *action, 0.1, LIM)
    np.testing.assert_allclose([float(g) for g in got], ref, atol=1e-6)


@given(st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi), st.floats(0, 40), st.floats(-5, 5), st.floats(-5, 5))
def test_bicycle_speed_nonnegative_and_finite(x, h, v, a1, a2):
    out = bicycle_step(x, 0.0, h, v, a1, a2, 0.1, LIM)
    assert all(np.isfinite(float(o)) for o in out)
    assert float(out[3]) >= 0.0


# ------------------------------------------------------------------ reset and observation

def test_reset_places_vehicles_at_cutoff(scenario):
    sim = Simulator(identity_adversary(scenario))
    obs = sim.reset()
    b = sim.batch
    np.testing.assert_array_equal(b.ego_states()[0, :4], scenario.ego.states[10, :4])
    assert b.t == 10
    assert obs.shape == (OBS_DIM,)
    assert obs[0] == pytest.approx(10 / 30)
    assert obs[1] == 0.0  # aligned with the lane


def test_reset_deterministic(scenario):
    sim = Simulator(identity_adversary(scenario))
    a = sim.reset()
    sim.step((0.2, 0.3))
    b = sim.reset()
    np.testing.assert_array_equal(a, b)


def test_empty_world_lidar_all_max():
    doc = minimal_doc()
    doc["map"]["boundaries"] = []
    doc["tracks"][1]["states"] = parked(200.0)
    obs = sim_for(doc).reset()
    assert len(obs[8:]) == N_RAYS
    assert np.all(obs[8:] == 1.0)


def test_vehicle_dead_ahead_lidar():
    doc = minimal_doc()
    doc["map"]["boundaries"] = []
    ego_x = doc["tracks"][0]["states"][10]["x"]
    doc["tracks"][1]["states"] = parked(ego_x + 10.0 + 4.5 / 2)
    sim = sim_for(doc)
    sim.reset()
    ranges = lidar_scan(sim.batch)[0]
    assert ranges.shape == (N_RAYS,)
    assert ranges[0] == pytest.approx(0.2)
    assert ranges[N_RAYS // 2] == 1.0


def test_ray_kernel_matches_numpy_and_shapely():
    rng = np.random.default_rng(0)
    boxes = [(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-3, 3), 4.5, 1.9) for _ in range(12)]
    polys = [box_polygon(*b) for b in boxes]
    segs = np.concatenate([
        np.stack([np.array(p.exterior.coords[:-1]), np.roll(np.array(p.exterior.coords[:-1]), -1, axis=0)], axis=1)
        for p in polys
    ])
    origins = rng.uniform(-5, 5, (3, 2))
    angles = rng.uniform(-np.pi, np.pi, (3, 1)) + 2 * np.pi * np.arange(N_RAYS)[None] / N_RAYS
    fast = ray_distances(origins, angles, segs)
    np.testing.assert_allclose(fast, ray_distances_reference(origins, angles, segs), atol=1e-12)
    for b in range(3):
        o = origins[b]
        for k in range(0, N_RAYS, 6):
            end = o + 50.0 * np.array([math.cos(angles[b, k]), math.sin(angles[b, k])])
            ray = LineString([o, end])
            hits = [ray.intersection(p.exterior) for p in polys]
            d = min([Point(o).distance(h) for h in hits if not h.is_empty] + [50.0])
            assert fast[b, k] == pytest.approx(d, abs=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(TEMPLATES), st.integers(0, 1000),
       st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=60))
def test_observation_bounds(template, seed, actions):
    s = forge_scenario(ForgeConfig(template, seed, 2))
    sim = raw_simulator(s)
    obs = sim.reset()
    assert obs.shape == (OBS_DIM,)
    for a in actions:
        obs, r, done, info = sim.step(a)
        assert obs.shape == (OBS_DIM,)
        assert np.all(np.abs(obs) <= 1.0)
        assert np.all(np.isfinite(obs)) and math.isfinite(r)
        assert sim.batch.speed[0] >= 0
        if done:
            break


# ------------------------------------------------------------------ rewards and termination

def test_throttle_reward_on_straight_lane():
    doc = minimal_doc()
    doc["tracks"][1]["states"] = parked(180.0)
    sim = sim_for(doc)
    sim.reset()
    _, r, done, info = sim.step((0.0, 1.0))
    assert r == pytest.approx(1.02, abs=1e-12)
    assert info["delta_d"] == pytest.approx(1.02, abs=1e-12)
    assert not done


def test_crash_penalty():
    doc = minimal_doc()
    ego_x = doc["tracks"][0]["states"][10]["x"]
    doc["tracks"][1]["states"] = parked(ego_x + 4.5 + 0.5)
    sim = sim_for(doc)
    sim.reset()
    _, r, done, info = sim.step((0.0, 0.0))
    assert done and info["crash"] and info["crash_with"] == "adv"
    assert r == pytest.approx(info["delta_d"] - 1.0)
    assert info["delta_d"] == pytest.approx(1.0)
    res = sim.result()
    assert res.crashed and not res.arrived and res.adversary_crash


def test_crash_penalty_scales_with_eta():
    doc = minimal_doc()
    ego_x = doc["tracks"][0]["states"][10]["x"]
    doc["tracks"][1]["states"] = parked(ego_x + 5.0)
    sim = Simulator(identity_adversary(scenario_from_dict(doc)), reward=RewardConfig(eta_crash=3.0))
    sim.reset()
    _, r, _, info = sim.step((0.0, 0.0))
    assert r == pytest.approx(info["delta_d"] - 3.0)


def test_out_of_road_penalty():
    doc = minimal_doc()
    doc["tracks"][1]["states"] = parked(180.0)
    for i, stt in enumerate(doc["tracks"][0]["states"]):
        stt["y"] = 1.6  # 0.15 m inside the left boundary
    sim = sim_for(doc)
    sim.reset()
    done = False
    for _ in range(10):
        _, r, done, info = sim.step((1.0, 0.0))
        if done:
            break
    assert done and info["out_of_road"] and not info["crash"]
    assert r == pytest.approx(info["delta_d"] - 10.0)
    assert sim.result().out_of_road


def test_lateral_offset_counts_as_out_of_road():
    doc = minimal_doc()
    doc["map"]["boundaries"] = []
    doc["tracks"][1]["states"] = parked(180.0)
    sim = sim_for(doc)
    sim.reset()
    for _ in range(40):
        _, r, done, info = sim.step((1.0, 0.3))
        if done:
            break
    assert info["out_of_road"]
    assert abs(sim.batch.y[0]) > 3.5  # lane width of the only lane


def test_step_after_done_rejected():
    doc = minimal_doc()
    ego_x = doc["tracks"][0]["states"][10]["x"]
    doc["tracks"][1]["states"] = parked(ego_x + 5.0)
    sim = sim_for(doc)
    with pytest.raises(SimulationError):
        sim.step((0, 0))
    sim.reset()
    sim.step((0, 0))
    with pytest.raises(SimulationError):
        sim.step((0, 0))


def test_arrival_ends_episode(scenario):
    sim = Simulator(identity_adversary(scenario))
    sim.reset()
    fut = scenario.logged_future("ego")
    for k in range(80):
        _, r, done, info = sim.step(teleport=fut[k])
        if done:
            break
    res = sim.result()
    assert info["arrived"] and res.arrived and not res.crashed
    assert res.route_completion == 1.0


# ------------------------------------------------------------------ invariants

def _random_episode(s, seed, n_envs=1):
    rng = np.random.default_rng(seed)
    sim = BatchSimulator(identity_adversary(s), n_envs)
    sim.reset()
    rewards, deltas, trace = [], [], []
    while not sim.done.all():
        a = np.column_stack([rng.uniform(-0.15, 0.15, n_envs), rng.uniform(-0.3, 1.0, n_envs)])
        _, r, _, info = sim.step(a)
        rewards.append(r.copy())
        deltas.append(info["delta_d"].copy())
        trace.append(sim.ego_states().copy())
    return sim, np.array(rewards), np.array(deltas), np.array(trace)


@pytest.mark.parametrize("template", TEMPLATES)
def test_determinism_bit_exact(template):
    s = forge_scenario(ForgeConfig(template, 21, 2))
    a = _random_episode(s, 5, 3)
    b = _random_episode(s, 5, 3)
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a[0].trajectory, b[0].trajectory)


@pytest.mark.parametrize("template", TEMPLATES)
def test_progress_conservation(template):
    s = forge_scenario(ForgeConfig(template, 8, 1))
    sim, rewards, deltas, _ = _random_episode(s, 1, 4)
    total = deltas.sum(axis=0)
    np.testing.assert_allclose(total, sim.progress - sim.d0, atol=1e-6)
    clean = ~(sim.crashed | sim.out_of_road)
    np.testing.assert_allclose(rewards.sum(axis=0)[clean],
                               (sim.route_completion() * sim.route_length)[clean], atol=1e-6)


def test_logged_ego_replay_never_crashes(small_corpus):
    train, test = small_corpus
    for name, s in train + test:
        sim = raw_simulator(s)
        sim.reset()
        fut = s.logged_future(s.ego_id)
        for k in range(s.future_steps):
            _, _, done, _ = sim.step(teleport=fut[k])
            if done:
                break
        res = sim.result()
        assert not res.crashed and not res.out_of_road, name
        assert res.route_completion > 0.95


def test_trajectory_held_after_termination():
    doc = minimal_doc()
    ego_x = doc["tracks"][0]["states"][10]["x"]
    doc["tracks"][1]["states"] = parked(ego_x + 6.5)
    sim = sim_for(doc)
    sim.reset()
    done = False
    while not done:
        _, _, done, _ = sim.step((0.0, 0.0))
    res = sim.result()
    assert res.trajectory.shape == (80, 5)
    held = np.repeat(res.trajectory[res.steps - 1][None], 80 - res.steps, axis=0)
    held[:, 4] = 0.0
    np.testing.assert_array_equal(res.trajectory[res.steps:], held)
    assert np.all(res.trajectory[:res.steps, 4] == 1.0)


def test_background_frozen_where_override_reaches_it():
    doc = minimal_doc()
    doc["tracks"].append({"id": "bg", "length": 4.5, "width": 1.8,
                          "states": straight_states(60.0, 0.0, 0.0, 10.0)})
    s = scenario_from_dict(doc)
    # override: the adversary speeds up and would run into the background car
    fut = np.array(s.logged_future("adv"))
    fut[:, 0] = s.adversary.states[10, 0] + np.arange(1, 81) * 0.1 * 14.0
    fut[:, 3] = 14.0
    fut[0, 0] = s.adversary.states[10, 0] + 1.0
    from catdrive.scenario import apply_adversary

    tracks = replay_tracks(apply_adversary(s, fut))
    bg = tracks["bg"]
    assert bg[-1, 3] == 0.0
    k = int(np.argmax(bg[:, 3] == 0.0))
    assert np.all(bg[k:, 0] == bg[k, 0])
