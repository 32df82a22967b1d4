from __future__ import annotations

import csv
import json

import pytest

from catdrive.cli import build_parser, main
from catdrive.scenario import load_adversarial_or_raw, load_scenario


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["forge", "corpus", "--n", "5", "--split", "0.6", "--seed", "2", "--out", str(out)]) == 0
    return out


def first_scene(corpus):
    manifest = json.loads((corpus / "manifest.json").read_text())
    return corpus / manifest["train"][0]


def test_parser_lists_every_command():
    p = build_parser()
    for cmd in ["forge", "predict", "attack", "rollout", "train", "eval-attack", "eval-policy", "render"]:
        assert p.parse_args(_minimal(cmd)).command == cmd


def _minimal(cmd):
    return {
        "forge": ["forge", "--out", "x"],
        "predict": ["predict", "--scenario", "s.json"],
        "attack": ["attack", "--scenario", "s.json"],
        "rollout": ["rollout", "--scenario", "s.json"],
        "train": ["train", "--pool", "p", "--out", "o"],
        "eval-attack": ["eval-attack", "--scenes", "p"],
        "eval-policy": ["eval-policy", "--ckpt", "idm", "--scenes", "p"],
        "render": ["render", "--trace", "t", "--out", "o"],
    }[cmd]


def test_forge_single_scene(tmp_path):
    assert main(["forge", "--template", "merge", "--seed", "4", "--out", str(tmp_path)]) == 0
    s = load_scenario(tmp_path / "merge_4.json")
    assert s.extras["forge"]["template"] == "merge"


def test_predict_writes_candidates(corpus, tmp_path):
    out = tmp_path / "cands.json"
    assert main(["predict", "--scenario", str(first_scene(corpus)), "--m", "6", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["candidates"]) == 6


def test_attack_rollout_render_chain(corpus, tmp_path):
    adv = tmp_path / "adv.json"
    trace = tmp_path / "trace.json"
    svg = tmp_path / "ep.svg"
    assert main(["attack", "--scenario", str(first_scene(corpus)), "--m", "8", "--out", str(adv)]) == 0
    report = json.loads(adv.read_text())["report"]
    assert 0 <= report["selected"] < 8
    assert len(report["candidates"]) == 8
    assert report["generation_time_ms"] > 0
    load_adversarial_or_raw(adv)

    assert main(["rollout", "--scenario", str(adv), "--agent", "replay", "--record", str(trace)]) == 0
    assert json.loads(trace.read_text())["frames"]
    assert main(["render", "--trace", str(trace), "--out", str(svg)]) == 0
    assert svg.read_text().startswith("<?xml")


def test_train_and_eval_policy(corpus, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--mode", "no_adv", "--pool", str(corpus), "--steps", "2", "--population", "4",
                 "--scenes-per-generation", "1", "--checkpoint-every", "1", "--out", str(run)]) == 0
    assert (run / "policy.json").exists()
    assert (run / "ckpt_00002" / "state.json").exists()
    with open(run / "metrics.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2

    rep = tmp_path / "policy_eval.json"
    assert main(["eval-policy", "--ckpt", str(run / "policy.json"), "--scenes", str(corpus), "--seeds", "0,1",
                 "--out", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert [s["seed"] for s in doc["seeds"]] == [0, 1]

    resumed = tmp_path / "resumed"
    assert main(["train", "--mode", "no_adv", "--pool", str(corpus), "--steps", "3",
                 "--resume", str(run / "ckpt_00002"), "--out", str(resumed)]) == 0
    with open(resumed / "metrics.csv", newline="") as fh:
        assert [int(r["generation"]) for r in csv.DictReader(fh)] == [1, 2, 3]


def test_eval_attack_none_generator(corpus, tmp_path):
    out = tmp_path / "attack.json"
    assert main(["eval-attack", "--scenes", str(corpus), "--generator", "none", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["success_rate"] == 0.0


def test_errors_return_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["rollout", "--scenario", str(bad)]) == 2
    assert "catdrive: error:" in capsys.readouterr().err
    assert main(["predict", "--scenario", str(tmp_path / "missing.json")]) == 2
