"""Safety-critical resampling of an opponent's future.

Each opponent candidate i is scored by

    posterior_i = prior_i * sum_j weight_j * coll_ij

where the weights come from a buffer of recent ego rollouts and
``coll_ij = alpha ** k`` for the earliest step k at which the two boxes
overlap (0 if they never do). The highest-scoring candidate is selected.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import HorizonMismatchError, boxes_gap, boxes_overlap, earliest_collision_step
from .predictor import CandidateSet, PredictorConfig, generate_candidates
from .scenario import HEADING, VALID, X, Y, AdversarialScenario, Scenario, apply_adversary, slice_history

DEFAULT_ALPHA = 0.99
DEFAULT_BUFFER = 5


class EmptyBufferError(ValueError):
    pass


@dataclass(frozen=True)
class DecayConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


class EgoRolloutBuffer:
    """The latest ``capacity`` ego trajectories with their accumulated log-probabilities."""

    def __init__(self, capacity: int = DEFAULT_BUFFER):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._entries: deque[tuple[np.ndarray, float]] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def append(self, trajectory, log_prob_sum: float = 0.0) -> "EgoRolloutBuffer":
        arr = np.array(trajectory, dtype=float)
        arr.setflags(write=False)
        self._entries.append((arr, float(log_prob_sum)))
        return self

    @property
    def trajectories(self) -> list[np.ndarray]:
        return [t for t, _ in self._entries]

    @property
    def log_probs(self) -> np.ndarray:
        return np.array([lp for _, lp in self._entries])

    @property
    def weights(self) -> np.ndarray:
        """Softmax over stored log-probability sums."""
        if not self._entries:
            return np.zeros(0)
        z = self.log_probs
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def snapshot(self) -> "EgoRolloutBuffer":
        out = EgoRolloutBuffer(self.capacity)
        out._entries.extend(self._entries)
        return out

    def to_arrays(self):
        if not self._entries:
            return np.zeros((0, 0, 5)), np.zeros(0)
        return np.stack(self.trajectories), self.log_probs

    @classmethod
    def from_arrays(cls, capacity: int, trajectories, log_probs) -> "EgoRolloutBuffer":
        buf = cls(capacity)
        for t, lp in zip(trajectories, log_probs):
            buf.append(t, float(lp))
        return buf


def update_ego_buffer(buf: EgoRolloutBuffer, trajectory, log_prob_sum: float) -> EgoRolloutBuffer:
    return buf.append(trajectory, log_prob_sum)


def seeded_buffer(scenario: Scenario, capacity: int = DEFAULT_BUFFER) -> EgoRolloutBuffer:
    """A buffer holding the logged ego future, weighted as log-probability 0."""
    return EgoRolloutBuffer(capacity).append(scenario.logged_future(scenario.ego_id), 0.0)


@dataclass(frozen=True)
class PosteriorScore:
    index: int
    prior: float
    steps: tuple[int | None, ...]  # earliest collision step per buffered ego
    p_coll: tuple[float, ...]
    weights: tuple[float, ...]
    posterior: float

    @property
    def min_step(self) -> int | None:
        hits = [k for k in self.steps if k is not None]
        return min(hits) if hits else None

    def recompute(self) -> float:
        total = 0.0
        for w, pc in zip(self.weights, self.p_coll):
            total += w * pc
        return self.prior * total


def collision_likelihood(ego, ego_dims, op, op_dims, alpha: float = DEFAULT_ALPHA) -> float:
    """``alpha ** k`` at the earliest overlap step k, else 0."""
    DecayConfig(alpha)
    k = earliest_collision_step(ego, ego_dims, op, op_dims)
    return 0.0 if k is None else alpha**k


def earliest_steps(ego_trajs: np.ndarray, ego_dims, op_trajs: np.ndarray, op_dims) -> np.ndarray:
    """Earliest overlap step for every (candidate, ego) pair, ``-1`` where none.

    ``ego_trajs`` is ``(N, K, >=3)`` and ``op_trajs`` is ``(M, K, >=3)``.
    """
    ego_trajs = np.asarray(ego_trajs, dtype=float)
    op_trajs = np.asarray(op_trajs, dtype=float)
    if ego_trajs.shape[1] != op_trajs.shape[1]:
        raise HorizonMismatchError(
            f"ego rollouts have {ego_trajs.shape[1]} steps but candidates have {op_trajs.shape[1]}"
        )
    e = ego_trajs[None, :, :, :]
    o = op_trajs[:, None, :, :]
    hit = boxes_overlap(
        e[..., X], e[..., Y], e[..., HEADING], ego_dims[0], ego_dims[1],
        o[..., X], o[..., Y], o[..., HEADING], op_dims[0], op_dims[1],
    )
    if ego_trajs.shape[-1] > VALID:
        hit &= ego_trajs[None, :, :, VALID] > 0.5
    if op_trajs.shape[-1] > VALID:
        hit &= op_trajs[:, None, :, VALID] > 0.5
    any_hit = hit.any(axis=-1)
    return np.where(any_hit, hit.argmax(axis=-1), -1)


def posterior_scores(cands: CandidateSet, buf: EgoRolloutBuffer, ego_dims, op_dims,
                     alpha: float = DEFAULT_ALPHA) -> list[PosteriorScore]:
    """Score every candidate against the buffered ego rollouts."""
    DecayConfig(alpha)
    if len(buf) == 0:
        raise EmptyBufferError(
            "the ego rollout buffer is empty; seed it with the logged ego trajectory first"
        )
    weights = buf.weights
    ks = earliest_steps(np.stack(buf.trajectories), ego_dims, cands.trajectories, op_dims)
    out = []
    for i, cand in enumerate(cands.candidates):
        steps, pcs = [], []
        total = 0.0
        for j in range(len(weights)):
            k = int(ks[i, j])
            pc = 0.0 if k < 0 else alpha**k
            steps.append(None if k < 0 else k)
            pcs.append(pc)
            total += weights[j] * pc
        out.append(
            PosteriorScore(i, cand.probability, tuple(steps), tuple(pcs),
                           tuple(float(w) for w in weights), cand.probability * total)
        )
    return out


def reference_posteriors(priors, weights, steps, alpha: float) -> list[float]:
    """Plain double loop over (candidate, ego) pairs; ``steps[i][j]`` is None or k."""
    out = []
    for i in range(len(priors)):
        total = 0.0
        for j in range(len(weights)):
            k = steps[i][j]
            total += weights[j] * (0.0 if k is None else alpha**k)
        out.append(priors[i] * total)
    return out


def closest_approach(ego_trajs: np.ndarray, ego_dims, op_trajs: np.ndarray, op_dims) -> np.ndarray:
    """Per-candidate smallest box gap to any buffered ego over the horizon."""
    e = np.asarray(ego_trajs, float)[None]
    o = np.asarray(op_trajs, float)[:, None]
    gap = boxes_gap(
        e[..., X], e[..., Y], e[..., HEADING], ego_dims[0], ego_dims[1],
        o[..., X], o[..., Y], o[..., HEADING], op_dims[0], op_dims[1],
    )
    valid = np.ones(gap.shape, bool)
    if e.shape[-1] > VALID:
        valid &= e[..., VALID] > 0.5
    if o.shape[-1] > VALID:
        valid &= o[..., VALID] > 0.5
    gap = np.where(valid, gap, np.inf)
    return gap.min(axis=(1, 2))


def select_adversarial(scores: list[PosteriorScore], fallback_gaps=None) -> int:
    """Index of the best candidate.

    Ties on the posterior go to the larger prior, then the earlier collision,
    then the lower index. When every posterior is zero, the candidate with the
    smallest ``fallback_gaps`` entry wins (lowest index on ties), or index 0
    when no gaps are supplied.
    """
    if not scores:
        raise ValueError("no candidates to select from")
    if all(s.posterior == 0.0 for s in scores):
        if fallback_gaps is None:
            return scores[0].index
        gaps = np.asarray(fallback_gaps, float)
        return int(scores[int(np.argmin(gaps))].index)

    def key(s: PosteriorScore):
        k = s.min_step
        return (-s.posterior, -s.prior, math.inf if k is None else k, s.index)

    return min(scores, key=key).index


@dataclass
class Generation:
    adversarial: AdversarialScenario
    candidates: CandidateSet
    scores: list[PosteriorScore]
    selected: int
    elapsed_ms: float
    fallback: bool


def generate_adversarial(scenario: Scenario, buf: EgoRolloutBuffer, alpha: float = DEFAULT_ALPHA,
                         predictor: PredictorConfig | None = None, prior_only: bool = False) -> Generation:
    """Predict opponent candidates, score them against ``buf`` and splice in the winner.

    ``prior_only`` ignores the collision terms and picks the most probable
    candidate; it is the ablation baseline. The elapsed time covers
    prediction, scoring and selection.
    """
    t0 = time.perf_counter()
    x = slice_history(scenario)
    cands = generate_candidates(x, scenario.adversary_id, cfg=predictor)
    ego_dims = scenario.ego.dims
    op_dims = scenario.adversary.dims
    if prior_only:
        scores = [PosteriorScore(i, c.probability, (), (), (), c.probability)
                  for i, c in enumerate(cands.candidates)]
        idx = select_adversarial(scores)
        fallback = False
    else:
        scores = posterior_scores(cands, buf, ego_dims, op_dims, alpha)
        fallback = all(s.posterior == 0.0 for s in scores)
        gaps = None
        if fallback:
            gaps = closest_approach(np.stack(buf.trajectories), ego_dims, cands.trajectories, op_dims)
        idx = select_adversarial(scores, gaps)
    elapsed = (time.perf_counter() - t0) * 1000.0
    adv = apply_adversary(scenario, cands.candidates[idx].states)
    return Generation(adv, cands, scores, idx, elapsed, fallback)


def factorization_check(p_op, p_ego_given_op, p_coll) -> float:
    """Max relative error between brute-force Bayes and the three-term product.

    The world has finite opponent futures ``i`` with prior ``p_op[i]``, ego
    futures ``j`` with conditional ``p_ego_given_op[i, j]``, and a collision
    probability ``p_coll[i, j]``. The brute force builds the full joint over
    (i, j, collision) and conditions on collision; the product form
    multiplies the three terms and normalizes.
    """
    p_op = np.asarray(p_op, float)
    p_ego = np.asarray(p_ego_given_op, float)
    p_coll = np.asarray(p_coll, float)
    n_op, n_ego = p_ego.shape
    # brute force: enumerate (i, j, c) with c in {no collision, collision}
    joint = np.zeros((n_op, n_ego, 2))
    for i in range(n_op):
        for j in range(n_ego):
            base = p_op[i] * p_ego[i, j]
            joint[i, j, 1] = base * p_coll[i, j]
            joint[i, j, 0] = base * (1.0 - p_coll[i, j])
    evidence = joint[:, :, 1].sum()
    if evidence <= 0.0:
        raise ValueError("no pair has positive collision probability; the posterior is undefined")
    brute = joint[:, :, 1] / evidence
    # product form, with each term read back off the joint by marginalizing
    pair = joint.sum(axis=2)
    term_op = pair.sum(axis=1)
    term_ego = pair / np.where(term_op > 0, term_op, 1.0)[:, None]
    term_coll = joint[:, :, 1] / np.where(pair > 0, pair, 1.0)
    product = term_op[:, None] * term_ego * term_coll
    product = product / product.sum()
    mask = brute > 0
    err = np.abs(product - brute)
    rel = np.where(mask, err / np.where(mask, brute, 1.0), err)
    return float(rel.max())


def random_table(rng: np.random.Generator, n_op: int = 3, n_ego: int = 4, independent: bool = False):
    """Random discrete world for ``factorization_check``."""
    p_op = rng.dirichlet(np.ones(n_op))
    if independent:
        p_ego = np.tile(rng.dirichlet(np.ones(n_ego)), (n_op, 1))
    else:
        p_ego = rng.dirichlet(np.ones(n_ego), size=n_op)
    p_coll = rng.uniform(0.0, 1.0, size=(n_op, n_ego))
    return p_op, p_ego, p_coll
