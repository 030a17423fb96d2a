"""Offline trajectory corpora and the goal/subgoal samplers used for training.

Samplers are vectorised: each returns a batch object of parallel numpy arrays
plus the bookkeeping indices (trajectory, time step, goal/subgoal index) so the
sampling rules can be asserted item by item.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import GoalEnv

__all__ = [
    "Trajectory",
    "Dataset",
    "GoalSamplingConfig",
    "ValueBatch",
    "HighBatch",
    "LowBatch",
    "FlatBatch",
    "rollout_behavior",
    "generate_dataset",
    "full_coverage_dataset",
    "sample_geometric_offset",
    "subgoal_index",
    "sample_value_batch",
    "sample_high_batch",
    "sample_low_batch",
    "sample_flat_batch",
    "strip_actions",
    "save_dataset",
    "load_dataset",
]

BEHAVIORS = ("optimal", "epsilon_noisy", "random_walk")
FILE_FORMAT = "hiql-dataset"
FILE_VERSION = 1


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or len(states) < 2:
            raise ValueError("a trajectory needs at least two states")
        object.__setattr__(self, "states", states)
        if self.actions is not None:
            actions = np.asarray(self.actions, dtype=np.int64)
            if actions.shape != (len(states) - 1,):
                raise ValueError("|actions| must equal |states| - 1")
            object.__setattr__(self, "actions", actions)

    @property
    def labeled(self) -> bool:
        return self.actions is not None

    @property
    def horizon(self) -> int:
        """Index ``T`` of the final state."""
        return len(self.states) - 1

    def check(self, env: GoalEnv) -> None:
        if self.states.max() >= env.num_states:
            raise ValueError("trajectory visits states outside the environment")
        if self.actions is not None:
            nxt = env.next_state[self.states[:-1], self.actions]
            if not np.array_equal(nxt, self.states[1:]):
                raise ValueError("trajectory is inconsistent with the environment dynamics")
        else:
            # without actions we can still require every hop to be one legal step
            ok = (env.next_state[self.states[:-1]] == self.states[1:, None]).any(axis=1)
            if not ok.all():
                raise ValueError("trajectory contains a transition no action produces")


class Dataset:
    """An in-memory list of trajectories with flattened index arrays for sampling.

    A corpus must carry at least one action-labeled trajectory unless it is
    explicitly built as a state-only corpus (``allow_unlabeled=True``).
    """

    def __init__(self, trajectories, env_hash: str | None = None, allow_unlabeled: bool = False):
        self.trajectories: tuple[Trajectory, ...] = tuple(trajectories)
        if not self.trajectories:
            raise ValueError("dataset is empty")
        if not allow_unlabeled and not any(t.labeled for t in self.trajectories):
            raise ValueError("dataset needs at least one action-labeled trajectory")
        self.env_hash = env_hash
        lengths = np.array([len(t.states) for t in self.trajectories], dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.horizons = lengths - 1
        self.states = np.concatenate([t.states for t in self.trajectories])
        self.labeled_mask = np.array([t.labeled for t in self.trajectories])
        # flat transition index -> (trajectory, t)
        self.trans_traj = np.repeat(np.arange(len(lengths)), self.horizons)
        self.trans_t = np.concatenate([np.arange(h) for h in self.horizons])
        self.traj_of_state = np.repeat(np.arange(len(lengths)), lengths)
        actions = np.full(len(self.states), -1, dtype=np.int64)
        for start, traj in zip(self.starts, self.trajectories):
            if traj.labeled:
                actions[start : start + traj.horizon] = traj.actions
        self.actions = actions
        self.labeled_transitions = np.flatnonzero(self.labeled_mask[self.trans_traj])

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def num_transitions(self) -> int:
        return int(self.horizons.sum())

    def check(self, env: GoalEnv) -> None:
        if self.env_hash is not None and self.env_hash != env.spec_hash():
            raise ValueError("dataset was generated for a different environment")
        for traj in self.trajectories:
            traj.check(env)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for traj in self.trajectories:
            h.update(traj.states.tobytes())
            h.update(b"|" if traj.actions is None else traj.actions.tobytes())
            h.update(b";")
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class GoalSamplingConfig:
    """Value-learning goal mixture: random / hindsight-future / current state."""

    p_random: float = 0.3
    p_future: float = 0.5
    p_current: float = 0.2
    gamma: float = 0.99

    def __post_init__(self):
        probs = (self.p_random, self.p_future, self.p_current)
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ValueError("goal-sampling probabilities must be non-negative and sum to 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class ValueBatch:
    s: np.ndarray
    s_next: np.ndarray
    g: np.ndarray
    r: np.ndarray
    traj: np.ndarray
    t: np.ndarray
    branch: np.ndarray  # 0 random, 1 future, 2 current
    offset: np.ndarray  # future offset, 0 for other branches

    def __len__(self):
        return len(self.s)


@dataclass
class HighBatch:
    s: np.ndarray
    subgoal: np.ndarray
    g: np.ndarray
    traj: np.ndarray
    t: np.ndarray
    subgoal_t: np.ndarray
    goal_t: np.ndarray  # -1 for the random-goal branch
    k_tilde: np.ndarray
    reward_sum: np.ndarray  # discounted reward of s_t..s_{t+k~-1}, for the full advantage

    def __len__(self):
        return len(self.s)


@dataclass
class LowBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    subgoal: np.ndarray
    traj: np.ndarray
    t: np.ndarray
    subgoal_t: np.ndarray

    def __len__(self):
        return len(self.s)


@dataclass
class FlatBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    g: np.ndarray
    traj: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.s)


@dataclass
class Segment:
    """One commanded sub-episode inside a generated trajectory."""

    start: int
    end: int
    goal: int
    reached: bool


@dataclass
class Rollout:
    trajectory: Trajectory
    segments: list[Segment] = field(default_factory=list)


def _behavior_action(env, s, goal, behavior, epsilon, rng) -> int:
    if behavior == "random_walk" or (behavior == "epsilon_noisy" and rng.random() < epsilon):
        return int(rng.integers(env.num_actions))
    best = np.flatnonzero(env.optimal_action_mask[s, goal])
    return int(best[rng.integers(len(best))])


def rollout_behavior(env: GoalEnv, behavior: str, max_len: int, rng, epsilon: float = 0.0) -> Rollout:
    """Roll out one behaviour trajectory of ``max_len`` transitions.

    Goal-directed behaviours command a random goal cell, walk toward it and
    re-command a fresh goal on arrival; ``random_walk`` ignores goals.
    """
    if behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {behavior!r}; expected one of {BEHAVIORS}")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if env.num_states < 2:
        raise ValueError("environment needs at least two states")
    n = env.num_states
    s = int(rng.integers(n))
    states, actions, segments = [s], [], []

    def new_goal(cur):
        g = int(rng.integers(n - 1))
        return g + (g >= cur)

    goal, seg_start = new_goal(s), 0
    for t in range(max_len):
        a = _behavior_action(env, s, goal, behavior, epsilon, rng)
        s = int(env.next_state[s, a])
        states.append(s)
        actions.append(a)
        if s == goal:
            segments.append(Segment(seg_start, t + 1, goal, True))
            goal, seg_start = new_goal(s), t + 1
    if seg_start < max_len:
        segments.append(Segment(seg_start, max_len, goal, False))
    return Rollout(Trajectory(np.array(states), np.array(actions)), segments)


def generate_dataset(
    env: GoalEnv,
    behavior: str = "epsilon_noisy",
    num_traj: int = 100,
    max_len: int = 100,
    seed: int = 0,
    epsilon: float = 0.2,
) -> Dataset:
    if num_traj < 1:
        raise ValueError("num_traj must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    rng = np.random.default_rng(seed)
    trajs = [rollout_behavior(env, behavior, max_len, rng, epsilon).trajectory for _ in range(num_traj)]
    return Dataset(trajs, env_hash=env.spec_hash())


def full_coverage_dataset(env: GoalEnv) -> Dataset:
    """One labeled two-state trajectory per (state, action) pair."""
    trajs = [
        Trajectory(np.array([s, env.next_state[s, a]]), np.array([a]))
        for s in range(env.num_states)
        for a in range(env.num_actions)
    ]
    return Dataset(trajs, env_hash=env.spec_hash())


def sample_geometric_offset(gamma: float, max_offset: np.ndarray, rng) -> np.ndarray:
    """Draw ``delta >= 1`` with ``P(delta=j) ∝ gamma**(j-1)``, truncated to ``max_offset``."""
    max_offset = np.asarray(max_offset, dtype=np.int64)
    if (max_offset < 1).any():
        raise ValueError("max_offset must be at least 1")
    u = rng.random(max_offset.shape)
    if gamma >= 1.0:
        return 1 + np.minimum((u * max_offset).astype(np.int64), max_offset - 1)
    # inverse CDF of the truncated geometric law
    tail = 1.0 - gamma ** max_offset.astype(np.float64)
    j = np.floor(np.log1p(-u * tail) / math.log(gamma)).astype(np.int64)
    return 1 + np.clip(j, 0, max_offset - 1)


def _check_nonempty(dataset: Dataset):
    if dataset.num_transitions == 0:
        raise ValueError("dataset has no transitions")


def sample_value_batch(dataset: Dataset, cfg: GoalSamplingConfig, batch_size: int, rng) -> ValueBatch:
    _check_nonempty(dataset)
    idx = rng.integers(dataset.num_transitions, size=batch_size)
    traj, t = dataset.trans_traj[idx], dataset.trans_t[idx]
    base = dataset.starts[traj]
    s = dataset.states[base + t]
    s_next = dataset.states[base + t + 1]

    u = rng.random(batch_size)
    branch = np.where(u < cfg.p_random, 0, np.where(u < cfg.p_random + cfg.p_future, 1, 2))
    offset = sample_geometric_offset(cfg.gamma, dataset.horizons[traj] - t, rng)
    random_goal = dataset.states[rng.integers(len(dataset.states), size=batch_size)]
    future_goal = dataset.states[base + t + offset]
    g = np.select([branch == 0, branch == 1], [random_goal, future_goal], default=s)
    offset = np.where(branch == 1, offset, 0)
    r = np.where(s == g, 0.0, -1.0)
    return ValueBatch(s, s_next, g, r, traj, t, branch, offset)


def subgoal_index(t, k: int, end):
    """Subgoal position ``min(t + k, end)``; ``end`` is ``t_g`` or the trajectory end ``T``."""
    if k < 1:
        raise ValueError("subgoal step k must be at least 1")
    return np.minimum(np.asarray(t) + k, np.asarray(end))


def _window_reward_sum(dataset, base, t, k_tilde, g, gamma):
    total = np.zeros(len(base))
    for j in range(int(k_tilde.max(initial=0))):
        live = j < k_tilde
        st = dataset.states[base + np.minimum(t + j, t + k_tilde - 1)]
        total += np.where(live, (gamma**j) * np.where(st == g, 0.0, -1.0), 0.0)
    return total


def sample_high_batch(
    dataset: Dataset, k: int, p_future_goal: float, batch_size: int, rng, gamma: float = 0.99
) -> HighBatch:
    """High-level triples ``(s_t, s_subgoal, g)``.

    Future branch: ``t_g`` uniform over ``t+1..T`` and subgoal index
    ``min(t+k, t_g)``. Random branch: ``g`` uniform over all dataset states and
    subgoal index ``min(t+k, T)``.
    """
    if k < 1:
        raise ValueError("subgoal step k must be at least 1")
    _check_nonempty(dataset)
    idx = rng.integers(dataset.num_transitions, size=batch_size)
    traj, t = dataset.trans_traj[idx], dataset.trans_t[idx]
    base, horizon = dataset.starts[traj], dataset.horizons[traj]
    future = rng.random(batch_size) < p_future_goal
    goal_t = t + 1 + (rng.random(batch_size) * (horizon - t)).astype(np.int64)
    goal_t = np.minimum(goal_t, horizon)
    random_goal = dataset.states[rng.integers(len(dataset.states), size=batch_size)]
    g = np.where(future, dataset.states[base + goal_t], random_goal)
    subgoal_t = subgoal_index(t, k, np.where(future, goal_t, horizon))
    k_tilde = subgoal_t - t
    reward_sum = _window_reward_sum(dataset, base, t, k_tilde, g, gamma)
    return HighBatch(
        s=dataset.states[base + t],
        subgoal=dataset.states[base + subgoal_t],
        g=g,
        traj=traj,
        t=t,
        subgoal_t=subgoal_t,
        goal_t=np.where(future, goal_t, -1),
        k_tilde=k_tilde,
        reward_sum=reward_sum,
    )


def sample_low_batch(dataset: Dataset, k: int, batch_size: int, rng) -> LowBatch:
    """Low-level tuples ``(s_t, a_t, s_{t+1}, s_min(t+k, T))`` from labeled trajectories only."""
    if k < 1:
        raise ValueError("subgoal step k must be at least 1")
    if len(dataset.labeled_transitions) == 0:
        raise ValueError("no action-labeled transitions to train on")
    idx = dataset.labeled_transitions[rng.integers(len(dataset.labeled_transitions), size=batch_size)]
    traj, t = dataset.trans_traj[idx], dataset.trans_t[idx]
    base = dataset.starts[traj]
    subgoal_t = subgoal_index(t, k, dataset.horizons[traj])
    return LowBatch(
        s=dataset.states[base + t],
        a=dataset.actions[base + t],
        s_next=dataset.states[base + t + 1],
        subgoal=dataset.states[base + subgoal_t],
        traj=traj,
        t=t,
        subgoal_t=subgoal_t,
    )


def sample_flat_batch(dataset: Dataset, p_future_goal: float, batch_size: int, rng) -> FlatBatch:
    """Flat-policy tuples ``(s, a, s', g)``; goals follow the high-level goal mixture."""
    if len(dataset.labeled_transitions) == 0:
        raise ValueError("no action-labeled transitions to train on")
    idx = dataset.labeled_transitions[rng.integers(len(dataset.labeled_transitions), size=batch_size)]
    traj, t = dataset.trans_traj[idx], dataset.trans_t[idx]
    base, horizon = dataset.starts[traj], dataset.horizons[traj]
    future = rng.random(batch_size) < p_future_goal
    goal_t = np.minimum(t + 1 + (rng.random(batch_size) * (horizon - t)).astype(np.int64), horizon)
    random_goal = dataset.states[rng.integers(len(dataset.states), size=batch_size)]
    return FlatBatch(
        s=dataset.states[base + t],
        a=dataset.actions[base + t],
        s_next=dataset.states[base + t + 1],
        g=np.where(future, dataset.states[base + goal_t], random_goal),
        traj=traj,
        t=t,
    )


def strip_actions(dataset: Dataset, labeled_fraction: float, rng) -> Dataset:
    """Keep actions on ``ceil(fraction * N)`` uniformly chosen trajectories, drop the rest."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    n = len(dataset)
    keep = set(rng.choice(n, size=math.ceil(labeled_fraction * n - 1e-9), replace=False).tolist())
    trajs = []
    for i, traj in enumerate(dataset.trajectories):
        if i in keep or traj.actions is None:
            trajs.append(traj)
        else:
            trajs.append(Trajectory(traj.states, None))
    return Dataset(trajs, env_hash=dataset.env_hash, allow_unlabeled=True)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {
            "format": FILE_FORMAT,
            "version": FILE_VERSION,
            "env_hash": dataset.env_hash,
            "num_trajectories": len(dataset),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for traj in dataset.trajectories:
            rec = {
                "states": traj.states.tolist(),
                "actions": None if traj.actions is None else traj.actions.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path, env: GoalEnv | None = None) -> Dataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FILE_FORMAT:
            raise ValueError(f"{path} is not a dataset file")
        if header.get("version") != FILE_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        trajs = []
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                trajs.append(Trajectory(np.array(rec["states"]), None if rec["actions"] is None else np.array(rec["actions"])))
    if len(trajs) != header["num_trajectories"]:
        raise ValueError("dataset file is truncated")
    dataset = Dataset(trajs, env_hash=header.get("env_hash"), allow_unlabeled=True)
    if env is not None:
        dataset.check(env)
    return dataset
