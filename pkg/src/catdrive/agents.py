"""Driving agents and the population-based policy optimizer.

Agents act on a ``BatchSimulator`` and return, per environment, an action
(or a teleport target for log replay) and the log-probability of the action.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import wrap_angles
from .scenario import HEADING, SPEED, VALID, AdversarialScenario
from .simulator import OBS_DIM, BatchSimulator, EpisodeResult, VehicleLimits, actions_from_accel

HIDDEN = (64, 64)
ACTION_DIM = 2
MIN_STD = 1e-6
POLICY_FORMAT = "catdrive-policy"
POLICY_VERSION = 1


# -------------------------------------------------------------------- IDM

@dataclass(frozen=True)
class IdmParams:
    v0: float = 15.0
    headway: float = 1.5
    s0: float = 2.0
    a_max: float = 1.5
    b: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.headway, self.s0, self.a_max, self.b, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")


def idm_accel(v: float, v_lead: float | None = None, gap: float | None = None,
              p: IdmParams | None = None, b_max: float = 8.0) -> float:
    """Intelligent Driver Model acceleration.

    Without a leader only the free-road term applies. A leader at a
    nonpositive gap yields the emergency value ``-b_max``.
    """
    p = p or IdmParams()
    free = 1.0 - (v / p.v0) ** p.delta
    if v_lead is None or gap is None:
        return p.a_max * free
    if gap <= 0:
        return -b_max
    s_star = p.s0 + v * p.headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b))
    return p.a_max * (free - (s_star / gap) ** 2)


def idm_equilibrium_gap(v: float, p: IdmParams | None = None) -> float:
    p = p or IdmParams()
    return (p.s0 + v * p.headway) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


class ReplayAgent:
    """Moves the ego along its logged trajectory, ignoring the dynamics."""

    name = "replay"

    def act(self, sim: BatchSimulator, obs):
        target = sim.scenario.ego.states[min(sim.t + 1, sim.scenario.horizon_steps - 1)]
        return None, np.tile(target, (sim.n, 1)), np.zeros(sim.n)


class StopAgent:
    """Brakes as hard as possible and stays stopped."""

    name = "stop"

    def act(self, sim: BatchSimulator, obs):
        a = np.zeros((sim.n, 2))
        a[:, 1] = -1.0
        return a, None, np.zeros(sim.n)


class IdmAgent:
    """IDM speed control with pure-pursuit steering along the ego route."""

    name = "idm"

    def __init__(self, params: IdmParams | None = None, leader_range: float = 40.0, lookahead: float = 6.0):
        self.params = params or IdmParams()
        self.leader_range = leader_range
        self.lookahead = lookahead

    def leaders(self, sim: BatchSimulator):
        """Per env: (speed along the route, bumper gap) of the nearest vehicle ahead, or None."""
        others, dims = sim.others_at(sim.t)
        out = [None] * sim.n
        if len(others) == 0:
            return out
        arcs, lat = sim.route.project_many(others[:, :2])
        tangent = sim.route.heading_at(arcs)
        along = others[:, SPEED] * np.cos(wrap_angles(others[:, HEADING] - tangent))
        on_route = (np.abs(lat) < 0.5 * sim.lane_width + 0.5 * dims[:, 1]) & (others[:, VALID] > 0.5)
        # a vehicle past the route's end projects onto it, so also check distance
        on_route &= np.hypot(*(others[:, :2] - sim.route.point_at(arcs)).T) < sim.lane_width
        for i in range(sim.n):
            ahead = on_route & (arcs > sim.progress[i]) & (arcs - sim.progress[i] <= self.leader_range)
            if not ahead.any():
                continue
            j = int(np.flatnonzero(ahead)[np.argmin(arcs[ahead])])
            gap = arcs[j] - sim.progress[i] - 0.5 * (sim.ego_dims[0] + dims[j, 0])
            out[i] = (float(max(along[j], 0.0)), float(gap))
        return out

    def act(self, sim: BatchSimulator, obs):
        lim = sim.limits
        accel = np.zeros(sim.n)
        for i, lead in enumerate(self.leaders(sim)):
            v = float(sim.speed[i])
            a = idm_accel(v, *(lead or (None, None)), p=self.params, b_max=lim.max_brake)
            accel[i] = np.clip(a, -lim.max_brake, lim.max_accel)
        ld = np.maximum(self.lookahead, sim.speed * 1.0)
        target = sim.route.point_at(sim.progress + ld, extrapolate=True)
        alpha = wrap_angles(np.arctan2(target[:, 1] - sim.y, target[:, 0] - sim.x) - sim.heading)
        dist = np.maximum(np.hypot(target[:, 0] - sim.x, target[:, 1] - sim.y), 1e-3)
        steer = np.arctan(2.0 * lim.wheelbase * np.sin(alpha) / dist)
        a1, a2 = actions_from_accel(accel, steer, lim)
        return np.column_stack([a1, a2]), None, np.zeros(sim.n)


# ----------------------------------------------------------------- policy

def param_count(obs_dim: int = OBS_DIM, hidden=HIDDEN, out: int = ACTION_DIM) -> int:
    sizes = (obs_dim, *hidden, out)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def default_obs_shift(obs_dim: int = OBS_DIM) -> np.ndarray:
    # lidar reads 1.0 in free space; center it so free space is 0
    shift = np.zeros(obs_dim)
    shift[8:] = 1.0
    return shift


@dataclass
class PolicyParams:
    """Flat weights of a tanh MLP plus exploration and input normalization."""

    flat: np.ndarray
    std: np.ndarray = field(default_factory=lambda: np.full(ACTION_DIM, 0.1))
    obs_dim: int = OBS_DIM
    hidden: tuple[int, ...] = HIDDEN
    obs_shift: np.ndarray = None
    obs_scale: np.ndarray = None

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.flat.shape != (param_count(self.obs_dim, self.hidden),):
            raise ValueError(f"expected {param_count(self.obs_dim, self.hidden)} parameters, got {self.flat.shape}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("policy parameters must be finite")
        if self.obs_shift is None:
            self.obs_shift = default_obs_shift(self.obs_dim)
        if self.obs_scale is None:
            self.obs_scale = np.ones(self.obs_dim)
        self.obs_shift = np.asarray(self.obs_shift, float)
        self.obs_scale = np.asarray(self.obs_scale, float)

    @classmethod
    def zeros(cls, **kw) -> "PolicyParams":
        obs_dim = kw.get("obs_dim", OBS_DIM)
        hidden = kw.get("hidden", HIDDEN)
        return cls(np.zeros(param_count(obs_dim, hidden)), **kw)

    def with_flat(self, flat) -> "PolicyParams":
        return PolicyParams(np.array(flat, float), self.std.copy(), self.obs_dim, self.hidden,
                            self.obs_shift.copy(), self.obs_scale.copy())


def _unpack(flat: np.ndarray, obs_dim: int, hidden):
    """Split ``(..., D)`` parameters into per-layer (weight, bias) pairs."""
    sizes = (obs_dim, *hidden, ACTION_DIM)
    layers, pos = [], 0
    lead = flat.shape[:-1]
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = flat[..., pos:pos + a * b].reshape(*lead, a, b)
        pos += a * b
        bias = flat[..., pos:pos + b]
        pos += b
        layers.append((w, bias))
    return layers


def policy_mean(params: PolicyParams, obs, flat=None) -> np.ndarray:
    """Pre-squash action means. ``flat`` may hold one parameter row per observation."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    obs2 = np.atleast_2d(obs)
    if obs2.shape[-1] != params.obs_dim:
        raise ValueError(f"observation has {obs2.shape[-1]} entries, policy expects {params.obs_dim}")
    if not np.all(np.isfinite(obs2)):
        raise ValueError("observation contains non-finite values")
    h = (obs2 - params.obs_shift) / params.obs_scale
    w = params.flat if flat is None else np.asarray(flat, float)
    layers = _unpack(w, params.obs_dim, params.hidden)
    for li, (weight, bias) in enumerate(layers):
        if weight.ndim == 2:
            h = h @ weight + bias
        else:
            h = np.einsum("bi,bij->bj", h, weight) + bias
        if li < len(layers) - 1:
            h = np.tanh(h)
    return h[0] if single else h


def squashed_log_prob(u, mean, std) -> np.ndarray:
    """Log-density of ``tanh(u)`` where ``u ~ N(mean, std^2)`` per channel, summed over channels."""
    std = np.maximum(np.asarray(std, float), MIN_STD)
    z = (u - mean) / std
    gauss = -0.5 * z**2 - np.log(std) - 0.5 * math.log(2.0 * math.pi)
    # log(1 - tanh(u)^2) written to stay finite for large |u|
    log_det = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return np.sum(gauss - log_det, axis=-1)


def policy_act(params: PolicyParams, obs, mode: str = "deterministic", rng: np.random.Generator | None = None,
               flat=None):
    """Action and its log-probability.

    Deterministic mode returns the squashed mean with log-probability 0.
    Stochastic mode draws Gaussian noise before squashing and returns the
    exact log-density of the squashed sample. Standard deviations below
    ``MIN_STD`` are raised to it, which keeps the density finite as the noise
    vanishes.
    """
    mean = policy_mean(params, obs, flat)
    if mode == "deterministic":
        lp = np.zeros(mean.shape[:-1]) if mean.ndim > 1 else 0.0
        return np.tanh(mean), lp
    if mode != "stochastic":
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng or np.random.default_rng()
    std = np.maximum(params.std, MIN_STD)
    u = mean + std * rng.standard_normal(mean.shape)
    lp = squashed_log_prob(u, mean, std)
    return np.tanh(u), (float(lp) if np.ndim(lp) == 0 else lp)


class PolicyAgent:
    """Runs one parameter row per environment; ``stochastic`` marks sampled envs."""

    name = "policy"

    def __init__(self, params: PolicyParams, flat_rows=None, stochastic=None, rng=None):
        self.params = params
        self.flat_rows = None if flat_rows is None else np.asarray(flat_rows, float)
        self.stochastic = None if stochastic is None else np.asarray(stochastic, bool)
        self.rng = rng or np.random.default_rng(0)

    def act(self, sim: BatchSimulator, obs):
        rows = self.flat_rows
        mean = policy_mean(self.params, obs, rows if rows is not None and rows.ndim == 2 else None)
        act = np.tanh(mean)
        lp = np.zeros(sim.n)
        if self.stochastic is not None and self.stochastic.any():
            idx = np.flatnonzero(self.stochastic)
            std = np.maximum(self.params.std, MIN_STD)
            u = mean[idx] + std * self.rng.standard_normal((len(idx), ACTION_DIM))
            act[idx] = np.tanh(u)
            lp[idx] = squashed_log_prob(u, mean[idx], std)
        return act, None, lp


def run_agent(agent, adv: AdversarialScenario, n_envs: int = 1, limits: VehicleLimits | None = None,
              reward=None, trace: list | None = None) -> list[EpisodeResult]:
    """Roll ``agent`` out in ``n_envs`` lockstep copies of ``adv`` until all finish."""
    sim = BatchSimulator(adv, n_envs, limits, reward)
    obs = sim.reset()
    lp_sum = np.zeros(n_envs)
    if trace is not None:
        trace.append(_frame(sim))
    while not sim.done.all():
        live = ~sim.done
        act, teleport, lp = agent.act(sim, obs)
        obs, _, _, info = sim.step(act, teleport)
        lp_sum += np.where(live, lp, 0.0)
        if trace is not None:
            trace.append(_frame(sim, info))
    return sim.results(lp_sum)


def _frame(sim: BatchSimulator, info=None) -> dict:
    others, _ = sim.others_at(sim.t)
    frame = {
        "step": int(sim.t),
        "ego": [float(sim.x[0]), float(sim.y[0]), float(sim.heading[0]), float(sim.speed[0])],
        "others": {vid: [float(v) for v in others[i, :4]] + [bool(others[i, VALID] > 0.5)]
                   for i, vid in enumerate(sim.other_ids)},
    }
    if info is not None:
        frame["crash_with"] = info["crash_with"][0]
        frame["out_of_road"] = bool(info["out_of_road"][0])
    return frame


# ---------------------------------------------------------------- CEM

@dataclass(frozen=True)
class CemConfig:
    population: int = 32
    elite_fraction: float = 0.25
    init_std: float = 0.1
    extra_noise: float = 0.05
    noise_decay: float = 0.995

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("elite_fraction must be in (0, 1]")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.population * self.elite_fraction)))


class CemOptimizer:
    """Cross-entropy method over a flat parameter vector with a diagonal Gaussian."""

    def __init__(self, mean, cfg: CemConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg or CemConfig()
        self.mean = np.array(mean, dtype=float)
        self.std = np.full_like(self.mean, self.cfg.init_std)
        self.noise = self.cfg.extra_noise
        self.rng = rng or np.random.default_rng(0)
        self.generation = 0

    def ask(self) -> np.ndarray:
        eps = self.rng.standard_normal((self.cfg.population, self.mean.size))
        return self.mean + self.std * eps

    def tell(self, samples: np.ndarray, returns) -> dict:
        returns = np.asarray(returns, float)
        order = np.argsort(-returns, kind="stable")
        elite = samples[order[: self.cfg.n_elite]]
        self.mean = elite.mean(axis=0)
        self.std = np.sqrt(elite.var(axis=0) + self.noise**2)
        self.noise *= self.cfg.noise_decay
        self.generation += 1
        return {
            "population_mean": float(returns.mean()),
            "elite_mean": float(returns[order[: self.cfg.n_elite]].mean()),
            "best": float(returns[order[0]]),
        }

    def state(self) -> dict:
        return {"mean": self.mean, "std": self.std, "noise": self.noise, "generation": self.generation}

    def load_state(self, st: dict):
        self.mean = np.array(st["mean"], float)
        self.std = np.array(st["std"], float)
        self.noise = float(st["noise"])
        self.generation = int(st["generation"])


def optimize_policy(params: PolicyParams, episode_sampler, optimizer: CemOptimizer):
    """One optimizer generation.

    ``episode_sampler`` maps a ``(P, D)`` array of candidate parameter rows to
    their returns. Returns the updated params and generation statistics.
    """
    samples = optimizer.ask()
    returns = episode_sampler(samples)
    stats = optimizer.tell(samples, returns)
    return params.with_flat(optimizer.mean), stats


# ------------------------------------------------------------ checkpoints

def policy_to_dict(p: PolicyParams) -> dict:
    return {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "architecture": {"input": p.obs_dim, "hidden": list(p.hidden), "output": ACTION_DIM,
                         "activation": "tanh", "output_squash": "tanh"},
        "obs_shift": p.obs_shift.tolist(),
        "obs_scale": p.obs_scale.tolist(),
        "std": p.std.tolist(),
        "params": p.flat.tolist(),
    }


def policy_from_dict(doc: dict) -> PolicyParams:
    if doc.get("format") != POLICY_FORMAT:
        raise ValueError("not a policy checkpoint")
    if doc.get("version") != POLICY_VERSION:
        raise ValueError(f"unsupported policy checkpoint version {doc.get('version')!r}")
    arch = doc["architecture"]
    if arch.get("output") != ACTION_DIM or arch.get("activation") != "tanh":
        raise ValueError("unsupported policy architecture")
    return PolicyParams(
        np.array(doc["params"], float),
        np.array(doc["std"], float),
        int(arch["input"]),
        tuple(arch["hidden"]),
        np.array(doc["obs_shift"], float),
        np.array(doc["obs_scale"], float),
    )


def save_policy(p: PolicyParams, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(p)), encoding="utf-8")


def load_policy(path) -> PolicyParams:
    return policy_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_agent(name: str):
    """Agent from its CLI name: ``replay``, ``idm``, ``stop`` or ``policy:<checkpoint>``."""
    if name == "replay":
        return ReplayAgent()
    if name == "idm":
        return IdmAgent()
    if name == "stop":
        return StopAgent()
    if name.startswith("policy:"):
        return PolicyAgent(load_policy(name.split(":", 1)[1]))
    raise ValueError(f"unknown agent {name!r}; use replay, idm, stop or policy:<checkpoint>")
