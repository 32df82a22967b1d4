from __future__ import annotations

import csv

import numpy as np
import pytest

from catdrive.forge import ForgeConfig, forge_scenario
from catdrive.pipeline import (
    METRIC_FIELDS,
    MODES,
    CatConfig,
    RuleBasedError,
    Trainer,
    load_pool,
    rule_based_adversary,
)
from catdrive.scenario import adversarial_from_dict, adversarial_to_dict, scenario_from_dict
from conftest import minimal_doc, straight_states

SMALL = dict(population=6, m=8, scenes_per_generation=1)


def validate_adversarial(adv):
    """Round-trip through the document format, which re-runs schema, invariant and splice checks."""
    back = adversarial_from_dict(adversarial_to_dict(adv))
    np.testing.assert_allclose(back.adversary_override, adv.adversary_override, atol=1e-9)


def small_trainer(mode, scenes, **kw):
    return Trainer(CatConfig(mode=mode, **{**SMALL, **kw}), scenes)


@pytest.fixture(scope="module")
def pool(small_corpus):
    train, _ = small_corpus
    return train[:3]


# ------------------------------------------------------------------ config

def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        CatConfig(mode="adversarial")
    with pytest.raises(ValueError):
        CatConfig(alpha=0.0)
    with pytest.raises(ValueError):
        CatConfig(n=0)
    with pytest.raises(ValueError):
        CatConfig(scenes_per_generation=0)


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        Trainer(CatConfig(), [])


# ------------------------------------------------------------------ buffer protocol

def test_buffer_starts_with_logged_future(pool):
    tr = small_trainer("closed_loop", pool)
    for name, s in pool:
        buf = tr.state.buffers[name]
        assert len(buf) == 1
        np.testing.assert_array_equal(buf.trajectories[0], s.logged_future(s.ego_id))
        np.testing.assert_array_equal(buf.log_probs, [0.0])


def test_closed_loop_buffer_keeps_newest_rollouts(pool):
    name, s = pool[0]
    tr = small_trainer("closed_loop", [(name, s)])
    tr.step()
    assert len(tr.state.buffers[name]) == 2
    for _ in range(9):
        tr.step()
    buf = tr.state.buffers[name]
    assert len(buf) == 5
    # the logged future was evicted; every entry is a policy rollout with a finite log-prob
    logged = s.logged_future(s.ego_id)
    assert not any(np.array_equal(t, logged) for t in buf.trajectories)
    assert np.all(np.isfinite(buf.log_probs))
    assert np.all(buf.log_probs != 0.0)
    assert tr.calls["predict"] == 10


def test_buffer_only_updated_for_visited_scenes(pool):
    tr = small_trainer("closed_loop", pool)
    tr.step()
    lengths = sorted(len(b) for b in tr.state.buffers.values())
    assert lengths == [1, 1, 2]


# ------------------------------------------------------------------ mode protocols

def test_no_adv_never_predicts(pool):
    tr = small_trainer("no_adv", pool)
    for _ in range(3):
        tr.step()
    assert tr.calls == {"predict": 0, "rule_based": 0}
    assert all(len(b) == 1 for b in tr.state.buffers.values())


def test_rule_based_never_predicts(pool):
    tr = small_trainer("rule_based", pool)
    for _ in range(4):
        tr.step()
    assert tr.calls["predict"] == 0
    assert 1 <= tr.calls["rule_based"] <= len(pool)


def test_open_loop_generates_once_per_scene(pool):
    tr = small_trainer("open_loop", pool)
    assert tr.calls["predict"] == len(pool)
    frozen = {k: v.copy() for k, v in tr.state.fixed_overrides.items()}
    assert set(frozen) == {n for n, _ in pool}
    for _ in range(3):
        tr.step()
    assert tr.calls["predict"] == len(pool)
    assert all(len(b) == 1 for b in tr.state.buffers.values())
    for name, ov in frozen.items():
        np.testing.assert_array_equal(tr.state.fixed_overrides[name], ov)
    again = small_trainer("open_loop", pool)
    for name, ov in frozen.items():
        np.testing.assert_array_equal(again.state.fixed_overrides[name], ov)


@pytest.mark.parametrize("mode", MODES)
def test_metrics_schema_is_shared(pool, mode):
    row = small_trainer(mode, pool).step()
    assert tuple(row) == METRIC_FIELDS
    assert row["generation"] == 1
    assert 0.0 <= row["crash_rate"] <= 1.0
    assert 0.0 <= row["route_completion"] <= 1.0


def test_closed_loop_adversaries_are_valid(pool):
    tr = small_trainer("closed_loop", pool)
    for name, _ in pool:
        adv, ms = tr.adversarial_for(name)
        validate_adversarial(adv)
        assert ms > 0.0


# ------------------------------------------------------------------ rule-based adversary

@pytest.mark.parametrize("seed", range(5))
def test_rule_based_crosses_straight_lane_centerline(seed):
    s = forge_scenario(ForgeConfig("straight_multilane", seed, 0))
    adv = rule_based_adversary(s)
    assert adv.adversary_override.shape == (s.future_steps, 5)
    validate_adversarial(adv)
    _, offsets = s.route_polyline.project_many(adv.adversary_override[:, :2])
    # on the centerline, or on both sides of it
    assert np.min(np.abs(offsets)) < 1e-6 or (offsets.min() < 0.0 < offsets.max())


def test_rule_based_reaches_ego_route_in_corpus(small_corpus):
    train, _ = small_corpus
    for _, s in train:
        adv = rule_based_adversary(s)
        validate_adversarial(adv)
        _, offsets = s.route_polyline.project_many(adv.adversary_override[:, :2])
        assert np.min(np.abs(offsets)) < 3.5


def test_rule_based_rejects_short_routes():
    doc = minimal_doc()
    doc["tracks"][0]["states"] = straight_states(5.0, 0.0, 0.0, 0.5)
    with pytest.raises(RuleBasedError):
        rule_based_adversary(scenario_from_dict(doc))


def test_rule_based_failure_skips_scene():
    doc = minimal_doc()
    doc["tracks"][0]["states"] = straight_states(5.0, 0.0, 0.0, 0.5)
    s = scenario_from_dict(doc)
    good = forge_scenario(ForgeConfig("straight_multilane", 1, 0))
    tr = small_trainer("rule_based", [("short", s), ("good", good)], scenes_per_generation=6)
    tr.step()
    assert tr.state.generation == 1
    assert "short" not in tr._rule_cache


# ------------------------------------------------------------------ checkpoints

def test_resume_reproduces_next_generation(pool, tmp_path):
    base = small_trainer("closed_loop", pool)
    base.run(10, tmp_path, checkpoint_every=10)
    ref = base.step()
    ref_flat = base.state.params.flat.copy()

    resumed = Trainer.resume(tmp_path / "ckpt_00010", pool)
    assert resumed.state.generation == 10
    row = resumed.step()
    # wall-clock generation time is the only field allowed to differ
    assert {k: v for k, v in row.items() if k != "gen_time_ms"} == {k: v for k, v in ref.items() if k != "gen_time_ms"}
    np.testing.assert_array_equal(resumed.state.params.flat, ref_flat)
    for name, _ in pool:
        a, la = base.state.buffers[name].to_arrays()
        b, lb = resumed.state.buffers[name].to_arrays()
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)


def test_run_writes_metrics_csv(pool, tmp_path):
    small_trainer("no_adv", pool).run(3, tmp_path)
    with open(tmp_path / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["generation"]) for r in rows] == [1, 2, 3]
    assert tuple(rows[0]) == METRIC_FIELDS
    assert (tmp_path / "final" / "state.json").exists()


def test_load_pool_respects_manifest(tmp_path):
    from catdrive.forge import write_corpus

    manifest = write_corpus(tmp_path, 5, 0.6, 1)
    train = load_pool(tmp_path, "train")
    test = load_pool(tmp_path, "test")
    assert len(train) == len(manifest["train"]) == 3
    assert len(test) == 2
    assert not {n for n, _ in train} & {n for n, _ in test}


# ------------------------------------------------------------------ learning

@pytest.mark.slow
def test_training_improves_route_completion():
    scenes = [(f"s{i}", forge_scenario(ForgeConfig("straight_multilane", i, 0))) for i in range(4)]
    tr = Trainer(CatConfig(mode="no_adv", population=16, scenes_per_generation=2, seed=0), scenes)
    tr.run(200)
    rc = [r["route_completion"] for r in tr.state.metrics]
    assert np.mean(rc[-20:]) > np.mean(rc[:20])
