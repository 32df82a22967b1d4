"""Training pipelines: no adversary, rule-based adversary, open-loop and closed-loop resampling.

All four modes share one loop. Each generation samples scenes uniformly,
builds the scene's adversarial variant for the current mode, rolls out the
current policy plus a population of perturbed copies, updates the policy by
the cross-entropy method and, in closed-loop mode, pushes the policy's own
rollout into the scene's ego buffer so the next attack targets it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agents import CemConfig, CemOptimizer, PolicyAgent, PolicyParams, policy_from_dict, policy_to_dict, run_agent
from .geometry import Polyline, bezier_through
from .predictor import PredictorConfig
from .resampler import EgoRolloutBuffer, generate_adversarial, seeded_buffer
from .scenario import (
    AdversarialScenario,
    Scenario,
    apply_adversary,
    identity_adversary,
    load_scenario,
)

log = logging.getLogger(__name__)

MODES = ("no_adv", "rule_based", "open_loop", "closed_loop")
METRIC_FIELDS = ("generation", "mean_return", "crash_rate", "route_completion", "out_of_road_rate",
                 "elite_return", "gen_time_ms")
STATE_VERSION = 1


class RuleBasedError(ValueError):
    pass


@dataclass(frozen=True)
class CatConfig:
    mode: str = "closed_loop"
    m: int = 32
    n: int = 5
    alpha: float = 0.99
    generations: int = 100
    scenes_per_generation: int = 2
    seed: int = 0
    population: int = 32
    elite_fraction: float = 0.25
    init_std: float = 0.1
    extra_noise: float = 0.05
    noise_decay: float = 0.995
    policy_std: float = 0.1
    rule_waypoints: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be at least 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.scenes_per_generation < 1:
            raise ValueError("scenes_per_generation must be at least 1")

    @property
    def cem(self) -> CemConfig:
        return CemConfig(self.population, self.elite_fraction, self.init_std, self.extra_noise, self.noise_decay)


# ------------------------------------------------------------ rule-based

def rule_based_adversary(s: Scenario, n_waypoints: int = 3) -> AdversarialScenario:
    """Bezier-spline adversary that passes through points on the ego's upcoming route.

    Waypoints: the adversary's first two logged future points, ``n_waypoints``
    points on the ego route at evenly spaced fractions of the logged ego
    progress, and the adversary's logged endpoint. The adversary accelerates
    uniformly so that it reaches the first route waypoint when the logged ego
    does.
    """
    h = s.history_steps
    route = s.route_polyline
    ego = s.ego.states
    ego_arcs, _ = route.project_many(ego[s.cutoff:, :2])
    progress = ego_arcs[-1] - ego_arcs[0]
    if progress < 10.0:
        raise RuleBasedError(f"ego route progress {progress:.1f} m is too short for a rule-based attack")
    adv = s.adversary.states
    fracs = np.arange(1, n_waypoints + 1) / (n_waypoints + 1)
    targets = ego_arcs[0] + fracs * progress
    ego_pts = route.point_at(targets)
    early = adv[min(h + 5, s.horizon_steps - 1), :2]
    ctrl = np.vstack([adv[h, :2], early, ego_pts, adv[-1, :2]])
    start_dir = (math.cos(adv[h, 2]), math.sin(adv[h, 2]))
    curve = bezier_through(ctrl, 40, start_dir)
    # keep going straight after the curve ends
    end_dir = curve.segment_dirs[-1]
    tail = curve.points[-1] + end_dir * np.arange(2.0, 202.0, 2.0)[:, None]
    path = Polyline(np.vstack([curve.points, tail]))

    # time at which the logged ego reaches the first route waypoint
    reach = np.flatnonzero(ego_arcs >= targets[0])
    k_ego = int(reach[0]) if len(reach) else len(ego_arcs) - 1  # steps after the cutoff
    t_hit = max((k_ego - 1) * s.dt, s.dt)  # override index 0 is one step after the cutoff
    s_hit = float(path.project_many(ego_pts[:1])[0][0])
    v0 = float(adv[h, 3])
    accel = float(np.clip(2.0 * (s_hit - v0 * t_hit) / t_hit**2, -6.0, 6.0))
    t = np.arange(s.future_steps) * s.dt
    if accel < 0 and v0 > 0:
        t_stop = v0 / -accel
        tt = np.minimum(t, t_stop)
    else:
        tt = t
    dist = v0 * tt + 0.5 * accel * tt**2
    speed = np.maximum(v0 + accel * tt, 0.0)
    xy = path.point_at(dist, extrapolate=True)
    heading = path.smooth_heading_at(dist)
    states = np.column_stack([xy, heading, speed, np.ones(len(t))])
    return apply_adversary(s, states)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    params: PolicyParams
    optimizer: CemOptimizer
    buffers: dict[str, EgoRolloutBuffer]
    generation: int
    rng: np.random.Generator
    metrics: list[dict] = field(default_factory=list)
    fixed_overrides: dict[str, np.ndarray] = field(default_factory=dict)


class Trainer:
    """Runs one pipeline mode over a pool of named scenarios."""

    def __init__(self, cfg: CatConfig, scenes: list[tuple[str, Scenario]], state: TrainState | None = None,
                 predictor: PredictorConfig | None = None):
        if not scenes:
            raise ValueError("the scenario pool is empty")
        self.cfg = cfg
        self.names = [n for n, _ in scenes]
        self.scenes = dict(scenes)
        self.predictor = predictor or PredictorConfig(m=cfg.m, seed=cfg.seed)
        self.calls = {"predict": 0, "rule_based": 0}
        self._rule_cache: dict[str, AdversarialScenario] = {}
        if state is None:
            rng = np.random.default_rng(cfg.seed)
            params = PolicyParams.zeros(std=np.full(2, cfg.policy_std))
            opt = CemOptimizer(params.flat, cfg.cem, rng)
            buffers = {n: seeded_buffer(self.scenes[n], cfg.n) for n in self.names}
            state = TrainState(params, opt, buffers, 0, rng)
            if cfg.mode == "open_loop":
                self._generate_open_loop(state)
        self.state = state

    # -- adversarial scene per mode
    def _generate_open_loop(self, state: TrainState):
        for name in self.names:
            s = self.scenes[name]
            try:
                g = generate_adversarial(s, seeded_buffer(s, self.cfg.n), self.cfg.alpha, self.predictor)
                self.calls["predict"] += 1
                state.fixed_overrides[name] = np.array(g.adversarial.adversary_override)
            except Exception as err:  # a broken scene must not stop training
                log.warning("open-loop generation failed for %s: %s", name, err)

    def adversarial_for(self, name: str) -> tuple[AdversarialScenario, float]:
        s = self.scenes[name]
        mode = self.cfg.mode
        if mode == "no_adv":
            return identity_adversary(s), 0.0
        if mode == "rule_based":
            if name not in self._rule_cache:
                self.calls["rule_based"] += 1
                self._rule_cache[name] = rule_based_adversary(s, self.cfg.rule_waypoints)
            return self._rule_cache[name], 0.0
        if mode == "open_loop":
            ov = self.state.fixed_overrides.get(name)
            return (identity_adversary(s) if ov is None else apply_adversary(s, ov)), 0.0
        g = generate_adversarial(s, self.state.buffers[name], self.cfg.alpha, self.predictor)
        self.calls["predict"] += 1
        return g.adversarial, g.elapsed_ms

    # -- one generation
    def step(self) -> dict:
        st = self.state
        cfg = self.cfg
        picks = st.rng.integers(len(self.names), size=cfg.scenes_per_generation)
        samples = st.optimizer.ask()
        rows = np.vstack([st.params.flat, st.params.flat, samples])
        stochastic = np.zeros(len(rows), bool)
        stochastic[1] = True
        agent = PolicyAgent(st.params, rows, stochastic, st.rng)
        totals = np.zeros(len(samples))
        used = 0
        mean_results = []
        gen_times = []
        for idx in picks:
            name = self.names[int(idx)]
            try:
                adv, ms = self.adversarial_for(name)
                results = run_agent(agent, adv, len(rows))
            except Exception as err:
                log.warning("generation %d: skipping %s after error: %s", st.generation, name, err)
                continue
            used += 1
            gen_times.append(ms)
            totals += np.array([r.episode_return for r in results[2:]])
            mean_results.append(results[0])
            if cfg.mode == "closed_loop":
                roll = results[1]
                st.buffers[name].append(roll.trajectory, roll.log_prob_sum)
        if used:
            stats = st.optimizer.tell(samples, totals / used)
            st.params = st.params.with_flat(st.optimizer.mean)
        else:
            stats = {"elite_mean": float("nan")}
        st.generation += 1
        row = {
            "generation": st.generation,
            "mean_return": _mean([r.episode_return for r in mean_results]),
            "crash_rate": _mean([float(r.crashed) for r in mean_results]),
            "route_completion": _mean([r.route_completion for r in mean_results]),
            "out_of_road_rate": _mean([float(r.out_of_road) for r in mean_results]),
            "elite_return": stats["elite_mean"],
            "gen_time_ms": _mean(gen_times),
        }
        st.metrics.append(row)
        return row

    def run(self, generations: int | None = None, out_dir=None, checkpoint_every: int = 0,
            callback=None) -> TrainState:
        target = self.cfg.generations if generations is None else generations
        while self.state.generation < target:
            row = self.step()
            if callback:
                callback(row)
            log.info("gen %d return %.2f crash %.2f completion %.2f", row["generation"], row["mean_return"],
                     row["crash_rate"], row["route_completion"])
            if out_dir and checkpoint_every and self.state.generation % checkpoint_every == 0:
                self.save(Path(out_dir) / f"ckpt_{self.state.generation:05d}")
        if out_dir:
            self.save(Path(out_dir) / "final")
            write_metrics(self.state.metrics, Path(out_dir) / "metrics.csv")
        return self.state

    # -- checkpoints
    def save(self, path) -> None:
        save_train_state(self.state, self.cfg, self.names, path)

    @classmethod
    def resume(cls, path, scenes: list[tuple[str, Scenario]], predictor=None) -> "Trainer":
        cfg, state = load_train_state(path)
        return cls(cfg, scenes, state, predictor)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_FIELDS})


def save_train_state(state: TrainState, cfg: CatConfig, names: list[str], path) -> None:
    """Write ``state.json`` (config, counters, RNG, metrics) and ``arrays.npz`` (weights, buffers)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "opt_mean": state.optimizer.mean,
        "opt_std": state.optimizer.std,
    }
    buffers = {}
    for i, name in enumerate(names):
        trajs, lps = state.buffers[name].to_arrays()
        arrays[f"buf_{i}"] = trajs
        arrays[f"buflp_{i}"] = lps
        buffers[name] = i
    for i, name in enumerate(names):
        if name in state.fixed_overrides:
            arrays[f"override_{i}"] = state.fixed_overrides[name]
    np.savez(out / "arrays.npz", **arrays)
    doc = {
        "version": STATE_VERSION,
        "config": asdict(cfg),
        "scenes": names,
        "generation": state.generation,
        "noise": state.optimizer.noise,
        "opt_generation": state.optimizer.generation,
        "rng": state.rng.bit_generator.state,
        "policy": policy_to_dict(state.params),
        "metrics": state.metrics,
        "buffer_capacity": cfg.n,
        "overrides": sorted(buffers[n] for n in state.fixed_overrides),
    }
    (out / "state.json").write_text(json.dumps(doc), encoding="utf-8")


def load_train_state(path) -> tuple[CatConfig, TrainState]:
    src = Path(path)
    doc = json.loads((src / "state.json").read_text(encoding="utf-8"))
    if doc.get("version") != STATE_VERSION:
        raise ValueError(f"unsupported training state version {doc.get('version')!r}")
    cfg = CatConfig(**doc["config"])
    arrays = np.load(src / "arrays.npz")
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng"]
    opt = CemOptimizer(arrays["opt_mean"], cfg.cem, rng)
    opt.load_state({"mean": arrays["opt_mean"], "std": arrays["opt_std"], "noise": doc["noise"],
                    "generation": doc["opt_generation"]})
    buffers = {}
    for i, name in enumerate(doc["scenes"]):
        buffers[name] = EgoRolloutBuffer.from_arrays(doc["buffer_capacity"], arrays[f"buf_{i}"], arrays[f"buflp_{i}"])
    overrides = {doc["scenes"][i]: arrays[f"override_{i}"] for i in doc["overrides"]}
    state = TrainState(policy_from_dict(doc["policy"]), opt, buffers, doc["generation"], rng,
                       list(doc["metrics"]), overrides)
    return cfg, state


def load_pool(pool_dir, split: str | None = "train") -> list[tuple[str, Scenario]]:
    """Scenarios from a corpus directory, restricted to a manifest split when one exists."""
    root = Path(pool_dir)
    manifest = root / "manifest.json"
    if split and manifest.exists():
        files = json.loads(manifest.read_text(encoding="utf-8"))[split]
    else:
        files = sorted(p.name for p in root.glob("*.json") if p.name != "manifest.json")
    return [(Path(f).stem, load_scenario(root / f)) for f in files]


def train(cfg: CatConfig, scenes, out_dir=None, checkpoint_every: int = 0) -> TrainState:
    return Trainer(cfg, scenes).run(out_dir=out_dir, checkpoint_every=checkpoint_every)
