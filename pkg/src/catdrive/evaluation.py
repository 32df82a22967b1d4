"""Attack-success and policy evaluation protocols, plus SVG rendering of episodes."""

from __future__ import annotations

import json
import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .agents import run_agent
from .geometry import box_corners
from .predictor import PredictorConfig
from .resampler import EgoRolloutBuffer, generate_adversarial
from .scenario import AdversarialScenario, Scenario, adversarial_to_dict, identity_adversary, scenario_from_dict

REPORT_VERSION = 1
GENERATORS = ("resample", "none", "prior_only")
EGO_COLOR = "#CD0000"
ADVERSARY_COLOR = "#00B0F0"
OTHER_COLOR = "#808080"


def _mean_std(xs) -> tuple[float, float]:
    xs = [float(x) for x in xs]
    if not xs:
        return float("nan"), float("nan")
    return float(np.mean(xs)), float(np.std(xs))


def attack_success_rate(agent, scenes: list[tuple[str, Scenario]], n_buffer: int = 1, generator: str = "resample",
                        alpha: float = 0.99, m: int = 32, seed: int = 0) -> dict:
    """Fraction of scenes where the generated adversary hits the fixed ``agent``.

    For each scene the agent first drives the raw scene ``n_buffer`` times to
    fill the ego buffer; the adversary is then generated against that buffer
    and the agent is replayed against it. ``generator="none"`` replays the
    raw scene and ``"prior_only"`` picks the most probable candidate.
    """
    if not scenes:
        raise ValueError("no scenes to evaluate")
    if generator not in GENERATORS:
        raise ValueError(f"generator must be one of {GENERATORS}")
    if n_buffer < 1:
        raise ValueError("n_buffer must be at least 1")
    pred = PredictorConfig(m=m, seed=seed)
    per_scene = []
    for name, s in scenes:
        gen_ms = None
        if generator == "none":
            adv = identity_adversary(s)
        else:
            buf = EgoRolloutBuffer(n_buffer)
            for _ in range(n_buffer):
                r = run_agent(agent, identity_adversary(s))[0]
                buf.append(r.trajectory, r.log_prob_sum)
            g = generate_adversarial(s, buf, alpha, pred, prior_only=(generator == "prior_only"))
            adv, gen_ms = g.adversarial, g.elapsed_ms
        res = run_agent(agent, adv)[0]
        collided = res.crash_with == s.adversary_id
        per_scene.append({
            "scene": name,
            "collided": bool(collided),
            "earliest_step": (res.steps - 1) if collided else None,
            "crash_with": res.crash_with,
            "generation_time_ms": gen_ms,
        })
    hits = sum(r["collided"] for r in per_scene)
    times = [r["generation_time_ms"] for r in per_scene if r["generation_time_ms"] is not None]
    t_mean, t_std = _mean_std(times)
    return {
        "report": "attack",
        "version": REPORT_VERSION,
        "generator": generator,
        "agent": getattr(agent, "name", type(agent).__name__),
        "n_buffer": n_buffer,
        "alpha": alpha,
        "m": m,
        "scenes": per_scene,
        "success_rate": hits / len(per_scene),
        "background_crash_rate": sum(
            r["crash_with"] is not None and not r["collided"] for r in per_scene) / len(per_scene),
        "generation_time_ms": {"mean": t_mean, "std": t_std},
    }


def eval_policy(agent, scenes: list[tuple[str, Scenario]], traffic: str = "log_replay", seeds=(0,),
                alpha: float = 0.99, m: int = 32) -> dict:
    """Route completion and crash rate of a frozen ``agent``.

    ``log_replay`` uses the raw scenes. ``safety_critical`` first generates
    an adversary against one rollout of the agent per scene (seeded by the
    evaluation seed) and evaluates on that scene.
    """
    if traffic not in ("log_replay", "safety_critical"):
        raise ValueError("traffic must be log_replay or safety_critical")
    if not scenes:
        raise ValueError("no scenes to evaluate")
    per_seed = []
    for seed in seeds:
        pred = PredictorConfig(m=m, seed=int(seed))
        episodes = []
        for name, s in scenes:
            adv = identity_adversary(s)
            if traffic == "safety_critical":
                r = run_agent(agent, adv)[0]
                buf = EgoRolloutBuffer(1).append(r.trajectory, r.log_prob_sum)
                adv = generate_adversarial(s, buf, alpha, pred).adversarial
            res = run_agent(agent, adv)[0]
            episodes.append({"scene": name, **res.to_dict()})
        per_seed.append({
            "seed": int(seed),
            "episodes": episodes,
            "route_completion": float(np.mean([e["route_completion"] for e in episodes])),
            "crash_rate": float(np.mean([e["crashed"] for e in episodes])),
            "out_of_road_rate": float(np.mean([e["out_of_road"] for e in episodes])),
        })
    rc = _mean_std([p["route_completion"] for p in per_seed])
    cr = _mean_std([p["crash_rate"] for p in per_seed])
    return {
        "report": "policy",
        "version": REPORT_VERSION,
        "traffic": traffic,
        "agent": getattr(agent, "name", type(agent).__name__),
        "seeds": per_seed,
        "route_completion": {"mean": rc[0], "std": rc[1]},
        "crash_rate": {"mean": cr[0], "std": cr[1]},
    }


# ---------------------------------------------------------------- traces

def record_episode(agent, adv: AdversarialScenario) -> dict:
    """Run one episode and return a trace document (scenario, frames, result)."""
    frames: list = []
    res = run_agent(agent, adv, trace=frames)[0]
    return {
        "trace": "episode",
        "version": REPORT_VERSION,
        "adversarial_scenario": adversarial_to_dict(adv),
        "frames": frames,
        "result": res.to_dict(),
    }


def _svg_id(text) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(text))


def _pts(points, flip) -> str:
    return " ".join(f"{x:.2f},{flip(y):.2f}" for x, y in points)


def render_episode(trace: dict, out_path=None) -> str:
    """One SVG document with a group per frame; the last frame is drawn opaque.

    Lanes are thin grey polylines, boundaries black, vehicles oriented
    rectangles (ego red, adversary blue, others grey), and the ego and
    adversary paths are drawn as arrows. If the episode ends in
    a crash, the colliding pair is outlined in a ``crash`` group.
    """
    frames = trace.get("frames") or []
    if not frames:
        raise ValueError("the trace has no frames")
    doc = trace["adversarial_scenario"]["scenario"]
    s = scenario_from_dict(doc)
    dims = {t.id: t.dims for t in s.tracks}
    pts = [ln.centerline.points for ln in s.map.lanes] + [b.points for b in s.map.boundaries]
    pts.append(np.array([f["ego"][:2] for f in frames]))
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0) - 10.0, allp.max(axis=0) + 10.0
    width, height = hi - lo

    def flip(y):
        return hi[1] + lo[1] - y  # svg y grows downwards

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="{lo[0]:.2f} {lo[1]:.2f} {width:.2f} {height:.2f}" '
        f'width="{max(width, 1.0) * 4:.0f}" height="{max(height, 1.0) * 4:.0f}">',
        f"<title>{escape('episode ' + json.dumps(trace.get('result', {})))}</title>",
        "<defs>",
    ]
    for name, color in (("ego", EGO_COLOR), ("adversary", ADVERSARY_COLOR)):
        out.append(f'<marker id="arrow-{name}" viewBox="0 0 10 10" refX="8" refY="5" markerWidth="4" '
                   f'markerHeight="4" orient="auto"><polygon points="0,0 10,5 0,10" fill="{color}"/></marker>')
    out += ["</defs>", '<g id="map">']
    for lane in s.map.lanes:
        out.append(f'<polyline id="lane-{_svg_id(lane.id)}" points="{_pts(lane.centerline.points, flip)}" '
                   'fill="none" stroke="#C8C8C8" stroke-width="0.3" stroke-dasharray="2,2"/>')
    for i, b in enumerate(s.map.boundaries):
        out.append(f'<polyline id="boundary-{i}" points="{_pts(b.points, flip)}" fill="none" '
                   'stroke="#000000" stroke-width="0.4"/>')
    out.append("</g>")
    ego_path = np.array([f["ego"][:2] for f in frames])
    if len(ego_path) > 1:
        out.append(f'<polyline id="ego-path" points="{_pts(ego_path, flip)}" fill="none" '
                   f'stroke="{EGO_COLOR}" stroke-width="0.5" marker-end="url(#arrow-ego)"/>')
    adv_path = np.array([f["others"][s.adversary_id][:2] for f in frames if s.adversary_id in f["others"]])
    if len(adv_path) > 1:
        out.append(f'<polyline id="adversary-path" points="{_pts(adv_path, flip)}" fill="none" '
                   f'stroke="{ADVERSARY_COLOR}" stroke-width="0.5" marker-end="url(#arrow-adversary)"/>')

    def rect(vid, state, color, opacity, stroke=None, extra=""):
        c = box_corners(state[0], state[1], state[2], *dims[vid])
        return (f'<polygon class="vehicle" points="{_pts(c, flip)}" fill="{color}" '
                f'fill-opacity="{opacity:.2f}" stroke="{stroke or color}" stroke-width="0.1"{extra}/>')

    n = len(frames)
    for k, f in enumerate(frames):
        opacity = 0.15 + 0.85 * (k + 1) / n
        out.append(f'<g id="frame-{k}" class="frame">')
        out.append(rect(s.ego_id, f["ego"], EGO_COLOR, opacity))
        for vid, st in f["others"].items():
            if len(st) > 4 and not st[4]:
                continue
            color = ADVERSARY_COLOR if vid == s.adversary_id else OTHER_COLOR
            out.append(rect(vid, st, color, opacity))
        out.append("</g>")
    last = frames[-1]
    partner = last.get("crash_with")
    if partner:
        out.append('<g id="crash" class="crash">')
        for vid, st in ((s.ego_id, last["ego"]), (partner, last["others"][partner])):
            out.append(rect(vid, st, "none", 0.0, "#FFB000", f' id="crash-{_svg_id(vid)}" stroke-dasharray="0.5,0.3"'))
        out.append("</g>")
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8")
    return text
