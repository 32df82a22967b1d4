from __future__ import annotations

import json

import numpy as np
import pytest

from catdrive.scenario import (
    HEADING,
    SPLICE_TOLERANCE,
    X,
    AdversarialScenario,
    ScenarioInvariantError,
    ScenarioParseError,
    ScenarioSchemaError,
    SpliceError,
    adversarial_from_dict,
    adversarial_to_dict,
    apply_adversary,
    dumps_canonical,
    identity_adversary,
    load_adversarial_or_raw,
    load_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    slice_history,
    splice_gap,
)
from conftest import FIXTURES


def test_minimal_scenario_loads(scenario):
    assert scenario.horizon_steps == 91
    assert all(t.states.shape == (91, 5) for t in scenario.tracks)
    assert scenario.future_steps == 80
    assert scenario.cutoff == 10
    assert scenario.route_polyline.length == pytest.approx(200.0)


def test_same_ego_and_adversary_names_both_fields(doc):
    doc["adversary_id"] = "ego"
    with pytest.raises(ScenarioInvariantError) as err:
        scenario_from_dict(doc)
    assert {"ego_id", "adversary_id"} <= set(err.value.fields)
    assert "ego_id" in str(err.value) and "adversary_id" in str(err.value)


def test_short_track_is_length_mismatch(doc):
    doc["tracks"][1]["states"] = doc["tracks"][1]["states"][:90]
    with pytest.raises(ScenarioInvariantError, match="90 states, expected 91"):
        scenario_from_dict(doc)


def test_missing_adversary_track(doc):
    doc["adversary_id"] = "ghost"
    with pytest.raises(ScenarioInvariantError, match="adversary_id"):
        scenario_from_dict(doc)


def test_schema_error_reports_path(doc):
    doc["tracks"][0]["states"][4]["speed"] = "fast"
    with pytest.raises(ScenarioSchemaError) as err:
        scenario_from_dict(doc)
    assert err.value.path == "tracks[0].states[4].speed"


def test_schema_rejects_negative_speed(doc):
    doc["tracks"][0]["states"][0]["speed"] = -1.0
    with pytest.raises(ScenarioSchemaError):
        scenario_from_dict(doc)


def test_lane_width_range(doc):
    doc["map"]["lanes"][0]["lane_width"] = 7.0
    with pytest.raises(ScenarioInvariantError, match="lane_width"):
        scenario_from_dict(doc)


def test_unknown_successor(doc):
    doc["map"]["lanes"][0]["successors"] = ["nowhere"]
    with pytest.raises(ScenarioInvariantError, match="successors"):
        scenario_from_dict(doc)


def test_history_must_precede_horizon(doc):
    doc["history_steps"] = 91
    with pytest.raises(ScenarioInvariantError):
        scenario_from_dict(doc)


def test_parse_error_is_distinct(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json", encoding="utf-8")
    with pytest.raises(ScenarioParseError):
        load_scenario(p)


def test_error_kinds_are_distinct():
    assert len({ScenarioParseError, ScenarioSchemaError, ScenarioInvariantError, SpliceError}) == 4
    assert not issubclass(ScenarioSchemaError, ScenarioInvariantError)
    assert not issubclass(ScenarioInvariantError, ScenarioSchemaError)


@pytest.mark.parametrize("path", sorted(FIXTURES.glob("*.json")), ids=lambda p: p.stem)
def test_save_load_round_trip_is_byte_equal(path, tmp_path):
    raw = path.read_text(encoding="utf-8")
    out = tmp_path / "copy.json"
    save_scenario(load_scenario(path), out)
    assert out.read_text(encoding="utf-8") == dumps_canonical(json.loads(raw))


def test_unknown_keys_preserved():
    s = load_scenario(FIXTURES / "minimal.json")
    doc = scenario_to_dict(s)
    assert doc["note"] == "kept"
    assert doc["map"]["signals"] == [{"id": "s1"}]
    assert doc["tracks"][0]["kind"] == "car"
    assert doc["tracks"][1]["states"][3]["occluded_by"] == "none"


def test_history_view_default(scenario):
    view = slice_history(scenario)
    assert all(v.shape == (11, 5) for v in view.tracks.values())
    with pytest.raises(ValueError):
        view.tracks["ego"][0, X] = 1.0
    with pytest.raises(TypeError):
        view.tracks["new"] = np.zeros((11, 5))


def test_history_view_never_leaks_future(doc):
    doc["history_steps"] = 1
    s = scenario_from_dict(doc)
    view = slice_history(s)
    assert all(v.shape == (1, 5) for v in view.tracks.values())
    np.testing.assert_array_equal(view.tracks["ego"][0], s.ego.states[0])


def test_track_states_read_only(scenario):
    with pytest.raises(ValueError):
        scenario.ego.states[0, 0] = 3.0


def test_identity_override_matches_base(scenario):
    adv = identity_adversary(scenario)
    np.testing.assert_array_equal(adv.adversary_states, scenario.adversary.states)
    again = apply_adversary(scenario, scenario.logged_future("adv"))
    np.testing.assert_array_equal(again.adversary_states, scenario.adversary.states)


def test_override_wrong_length(scenario):
    with pytest.raises(SpliceError, match="expected 80"):
        apply_adversary(scenario, scenario.logged_future("adv")[:-1])


def test_override_displaced_ten_metres(scenario):
    fut = np.array(scenario.logged_future("adv"))
    assert splice_gap(scenario.adversary.states[10], fut[0], 0.1) == pytest.approx(0.0, abs=1e-9)
    fut[:, X] += 10.0
    assert splice_gap(scenario.adversary.states[10], fut[0], 0.1) == pytest.approx(10.0)
    with pytest.raises(SpliceError, match="10.000 m"):
        apply_adversary(scenario, fut)


def test_splice_tolerance_boundary(scenario):
    fut = np.array(scenario.logged_future("adv"))
    fut[:, X] += SPLICE_TOLERANCE - 1e-6
    apply_adversary(scenario, fut)
    fut[:, X] += 2e-6
    with pytest.raises(SpliceError):
        apply_adversary(scenario, fut)


def test_override_preserves_other_tracks(scenario):
    fut = np.array(scenario.logged_future("adv"))
    fut[:, HEADING] = 0.3
    adv = apply_adversary(scenario, fut)
    assert adv.track_states("ego") is scenario.ego.states
    np.testing.assert_array_equal(adv.adversary_states[:11], scenario.adversary.states[:11])
    np.testing.assert_array_equal(adv.adversary_states[11:, HEADING], 0.3)


def test_adversarial_round_trip(scenario, tmp_path):
    adv = identity_adversary(scenario)
    doc = adversarial_to_dict(adv)
    back = adversarial_from_dict(json.loads(json.dumps(doc)))
    assert isinstance(back, AdversarialScenario)
    np.testing.assert_array_equal(back.adversary_override, adv.adversary_override)
    p = tmp_path / "adv.json"
    p.write_text(json.dumps(doc), encoding="utf-8")
    np.testing.assert_array_equal(load_adversarial_or_raw(p).adversary_states, adv.adversary_states)
    raw = tmp_path / "raw.json"
    save_scenario(scenario, raw)
    np.testing.assert_array_equal(load_adversarial_or_raw(raw).adversary_states, scenario.adversary.states)
