from __future__ import annotations

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from catdrive.agents import IdmAgent, PolicyAgent, PolicyParams, ReplayAgent, StopAgent
from catdrive.evaluation import attack_success_rate, eval_policy, record_episode, render_episode
from catdrive.predictor import PredictorConfig
from catdrive.resampler import generate_adversarial, seeded_buffer
from catdrive.scenario import identity_adversary

SVG_NS = "{http://www.w3.org/2000/svg}"
# SVG 1.1 elements and attributes the renderer may emit
SVG_ELEMENTS = {"svg", "title", "defs", "marker", "g", "polyline", "polygon"}
SVG_ATTRS = {
    "svg": {"version", "viewBox", "width", "height"},
    "title": set(),
    "defs": set(),
    "marker": {"id", "viewBox", "refX", "refY", "markerWidth", "markerHeight", "orient"},
    "g": {"id", "class"},
    "polyline": {"id", "points", "fill", "stroke", "stroke-width", "stroke-dasharray", "marker-end"},
    "polygon": {"id", "class", "points", "fill", "fill-opacity", "stroke", "stroke-width", "stroke-dasharray"},
}


def check_svg(text: str) -> ET.Element:
    root = ET.fromstring(text.encode("utf-8"))
    assert root.tag == SVG_NS + "svg"
    ids = []
    for el in root.iter():
        assert el.tag.startswith(SVG_NS)
        name = el.tag[len(SVG_NS):]
        assert name in SVG_ELEMENTS, name
        assert set(el.attrib) <= SVG_ATTRS[name], (name, set(el.attrib) - SVG_ATTRS[name])
        if "id" in el.attrib:
            ids.append(el.attrib["id"])
        if "points" in el.attrib:
            coords = [float(v) for pair in el.attrib["points"].split() for v in pair.split(",")]
            assert len(coords) % 2 == 0 and all(np.isfinite(coords))
    assert len(ids) == len(set(ids)), "duplicate ids"
    for el in root.iter():
        ref = el.get("marker-end")
        if ref:
            assert ref.startswith("url(#") and ref[5:-1] in ids
    return root


# ------------------------------------------------------------------ attack evaluation

def test_raw_scenes_are_never_attacked(small_corpus):
    train, test = small_corpus
    report = attack_success_rate(ReplayAgent(), train + test, generator="none")
    assert report["success_rate"] == 0.0
    assert report["generation_time_ms"]["mean"] != report["generation_time_ms"]["mean"]  # nan: nothing generated


def test_attack_report_fields(small_corpus):
    train, _ = small_corpus
    report = attack_success_rate(ReplayAgent(), train[:3], m=8)
    assert report["report"] == "attack"
    assert report["generator"] == "resample"
    assert len(report["scenes"]) == 3
    for row in report["scenes"]:
        assert set(row) == {"scene", "collided", "earliest_step", "crash_with", "generation_time_ms"}
        assert row["generation_time_ms"] > 0.0
        assert (row["earliest_step"] is None) == (not row["collided"])
    assert report["success_rate"] == sum(r["collided"] for r in report["scenes"]) / 3
    json.dumps(report)


def test_attack_matches_direct_generation(small_corpus):
    # the replay agent drives the logged future, so a one-rollout buffer equals the seeded one
    _, s = small_corpus[0][0]
    report = attack_success_rate(ReplayAgent(), [("one", s)], m=8, seed=4)
    g = generate_adversarial(s, seeded_buffer(s, 1), 0.99, PredictorConfig(m=8, seed=4))
    hit_expected = any(sc.posterior > 0 for sc in g.scores)
    assert report["scenes"][0]["collided"] == hit_expected


def test_attack_rejects_bad_arguments(small_corpus):
    train, _ = small_corpus
    with pytest.raises(ValueError):
        attack_success_rate(ReplayAgent(), [], generator="none")
    with pytest.raises(ValueError):
        attack_success_rate(ReplayAgent(), train, generator="random")
    with pytest.raises(ValueError):
        attack_success_rate(ReplayAgent(), train, n_buffer=0)


# ------------------------------------------------------------------ policy evaluation

def test_eval_policy_report(small_corpus):
    _, test = small_corpus
    report = eval_policy(IdmAgent(), test, "log_replay", seeds=[0, 1])
    assert report["report"] == "policy"
    assert [p["seed"] for p in report["seeds"]] == [0, 1]
    # raw traffic and a deterministic agent: seeds agree
    assert report["route_completion"]["std"] == 0.0
    assert 0.0 <= report["route_completion"]["mean"] <= 1.0
    assert len(report["seeds"][0]["episodes"]) == len(test)


def test_eval_policy_safety_critical_runs(small_corpus):
    _, test = small_corpus
    report = eval_policy(PolicyAgent(PolicyParams.zeros()), test, "safety_critical", seeds=[0], m=8)
    assert 0.0 <= report["crash_rate"]["mean"] <= 1.0


def test_eval_policy_rejects_unknown_traffic(small_corpus):
    with pytest.raises(ValueError):
        eval_policy(IdmAgent(), small_corpus[1], "dense")


# ------------------------------------------------------------------ traces and rendering

def test_record_and_render(scenario, tmp_path):
    trace = record_episode(StopAgent(), identity_adversary(scenario))
    assert trace["trace"] == "episode"
    k = len(trace["frames"])
    assert k == trace["result"]["steps"] + 1 or k == trace["result"]["steps"]
    out = tmp_path / "ep.svg"
    text = render_episode(json.loads(json.dumps(trace)), out)
    assert out.read_text(encoding="utf-8") == text
    root = check_svg(text)
    frames = [g for g in root.iter(SVG_NS + "g") if g.get("class") == "frame"]
    assert len(frames) == k
    assert [g.get("id") for g in frames] == [f"frame-{i}" for i in range(k)]
    assert root.find(f"{SVG_NS}polyline[@id='ego-path']").get("marker-end") == "url(#arrow-ego)"
    opacities = [float(g.find(SVG_NS + "polygon").get("fill-opacity")) for g in frames]
    assert opacities == sorted(opacities)
    assert opacities[-1] == pytest.approx(1.0)


def test_render_marks_crash(scenario):
    from catdrive.scenario import apply_adversary

    adv = identity_adversary(scenario)
    trace = record_episode(StopAgent(), adv)
    assert trace["result"]["crashed"] is False
    assert 'id="crash"' not in render_episode(trace)

    # the adversary stops dead one step past the cutoff; the replayed ego drives into it
    slow = adv.adversary_override.copy()
    slow[:, 0] = slow[0, 0]
    slow[:, 3] = 0.0
    trace = record_episode(ReplayAgent(), apply_adversary(scenario, slow))
    assert trace["result"]["crashed"] is True
    root = check_svg(render_episode(trace))
    crash = [g for g in root.iter(SVG_NS + "g") if g.get("id") == "crash"]
    assert len(crash) == 1
    assert {p.get("id") for p in crash[0]} == {"crash-ego", "crash-adv"}


def test_render_requires_frames(scenario):
    trace = record_episode(StopAgent(), identity_adversary(scenario))
    trace["frames"] = []
    with pytest.raises(ValueError):
        render_episode(trace)
