"""Test-time policy composition, evaluation rollouts and policy-accuracy metrics.

Agents expose ``greedy_actions(states, goals, memory)`` over batches. ``memory``
is a per-rollout dict an agent may use (the hierarchical agent keeps held
subgoals there). Exploration noise is applied by the caller.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import GoalEnv

__all__ = [
    "EvalConfig",
    "EvalReport",
    "OracleAgent",
    "UniformAgent",
    "FlatAgent",
    "HierarchicalAgent",
    "ValueGreedyAgent",
    "HierarchicalValueGreedyAgent",
    "act_hierarchical",
    "epsilon_greedy",
    "evaluate",
    "policy_accuracy",
    "sample_goal_pairs",
]


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    max_steps: int = 100
    epsilon: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass
class EvalReport:
    success_rate: float
    mean_return: float
    episodes: list[dict] = field(default_factory=list)
    accuracy: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class OracleAgent:
    """Picks the lowest-numbered optimal action."""

    def __init__(self, env: GoalEnv):
        self.env = env

    def greedy_actions(self, states, goals, memory=None):
        mask = self.env.optimal_action_mask[states, goals]
        return np.where(mask.any(axis=1), np.argmax(mask, axis=1), 0)


class UniformAgent:
    """Uniform-random actions drawn from a fixed stream (ties irrelevant)."""

    def __init__(self, env: GoalEnv, seed: int = 0):
        self.env = env
        self.rng = np.random.default_rng(seed)

    def greedy_actions(self, states, goals, memory=None):
        return self.rng.integers(self.env.num_actions, size=len(states))


class FlatAgent:
    def __init__(self, policy):
        self.policy = policy

    def greedy_actions(self, states, goals, memory=None):
        return self.policy.greedy(states, goals)


class HierarchicalAgent:
    """``pi_l(a | s, pi_h(s, g))`` with the subgoal recomputed every ``subgoal_hold`` steps."""

    def __init__(self, high, low, subgoal_hold: int = 1):
        if high.mode != low.mode:
            raise ValueError("high- and low-level policies must use the same subgoal mode")
        if subgoal_hold < 1:
            raise ValueError("subgoal_hold must be at least 1")
        self.high, self.low, self.subgoal_hold = high, low, subgoal_hold

    def subgoals(self, states, goals):
        return self.high.predict(states, goals)

    def greedy_actions(self, states, goals, memory=None):
        if self.subgoal_hold == 1 or memory is None:
            target = self.subgoals(states, goals)
        else:
            rows = memory["rows"]
            held = memory.get("subgoal")
            if held is None:
                held = memory["subgoal"] = self.subgoals(memory["all_states"], memory["all_goals"])
            refresh = memory["t"] % self.subgoal_hold == 0
            if refresh:
                held[rows] = self.subgoals(states, goals)
            target = held[rows]
        return self.low.greedy(states, target)


class ValueGreedyAgent:
    """Flat greedy selection on a value table: ``argmax_a V(step(s, a), g)``."""

    def __init__(self, env: GoalEnv, table):
        self.env, self.table = env, np.asarray(table)

    def greedy_actions(self, states, goals, memory=None):
        succ = self.env.next_state[states]  # [b, a]
        return np.argmax(self.table[succ, np.asarray(goals)[:, None]], axis=1)


class HierarchicalValueGreedyAgent:
    """Pick the best state within ``k`` steps as subgoal, then act greedily toward it."""

    def __init__(self, env: GoalEnv, table, k: int):
        self.env, self.table, self.k = env, np.asarray(table), int(k)
        self.within = env.distances <= self.k

    def subgoals(self, states, goals):
        states, goals = np.asarray(states), np.asarray(goals)
        scores = np.where(self.within[states], self.table[:, goals].T, -np.inf)
        return np.argmax(scores, axis=1)

    def greedy_actions(self, states, goals, memory=None):
        sub = self.subgoals(states, goals)
        succ = self.env.next_state[states]
        return np.argmax(self.table[succ, sub[:, None]], axis=1)


def epsilon_greedy(greedy_action: int, num_actions: int, epsilon: float, rng) -> int:
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(num_actions))
    return int(greedy_action)


def act_hierarchical(high, low, value, s, g, rng, epsilon: float = 0.0) -> int:
    """Single-state hierarchical action with epsilon-greedy mixing on the final action.

    ``value`` is accepted so the trained triple can be passed as one unit, but it
    is not queried: the high-level head already emits the latent subgoal, so
    execution needs only the two policies (``None`` is fine).
    """
    target = high.predict(np.atleast_1d(s), np.atleast_1d(g))
    a = int(low.greedy(np.atleast_1d(s), target)[0])
    return epsilon_greedy(a, low.env.num_actions, epsilon, rng)


def sample_goal_pairs(env: GoalEnv, n: int, rng, min_distance: int = 1, max_distance: int | None = None):
    """``n`` (start, goal) pairs drawn uniformly among pairs within the distance band."""
    d = env.distances
    hi = env.diameter if max_distance is None else max_distance
    ss, gg = np.nonzero((d >= max(min_distance, 1)) & (d <= hi))
    if len(ss) == 0:
        raise ValueError("no state-goal pairs in the requested distance band")
    pick = rng.choice(len(ss), size=n, replace=len(ss) < n)
    return np.stack([ss[pick], gg[pick]], axis=1)


def evaluate(agent, env: GoalEnv, pairs, cfg: EvalConfig) -> EvalReport:
    """Roll out ``cfg.episodes`` episodes (cycling through ``pairs``) in lockstep.

    Each episode owns an RNG stream spawned from ``cfg.seed``; reward is -1 per
    step until the goal is reached.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = cfg.episodes
    starts = pairs[np.arange(n) % len(pairs), 0]
    goals = pairs[np.arange(n) % len(pairs), 1]
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(n)]
    state = starts.copy()
    steps = np.zeros(n, dtype=np.int64)
    done = state == goals
    memory = {"all_states": state.copy(), "all_goals": goals}
    for t in range(cfg.max_steps):
        live = np.flatnonzero(~done)
        if len(live) == 0:
            break
        memory.update(rows=live, t=t)
        greedy = agent.greedy_actions(state[live], goals[live], memory)
        for row, a in zip(live, greedy):
            a = epsilon_greedy(a, env.num_actions, cfg.epsilon, streams[row])
            state[row] = env.next_state[state[row], a]
            steps[row] += 1
        done = state == goals
    success = done
    records = [
        {
            "episode": i,
            "start": int(starts[i]),
            "goal": int(goals[i]),
            "distance": int(env.distances[starts[i], goals[i]]),
            "success": bool(success[i]),
            "steps": int(steps[i]),
            "return": -float(steps[i]),
        }
        for i in range(n)
    ]
    return EvalReport(
        success_rate=float(np.mean(success)),
        mean_return=float(np.mean([r["return"] for r in records])),
        episodes=records,
    )


def policy_accuracy(agent, env: GoalEnv, pairs, distant_threshold: int | None = None) -> dict:
    """Fraction of pairs whose greedy action is optimal, overall and by distance bin."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    s, g = pairs[:, 0], pairs[:, 1]
    if (s == g).any():
        raise ValueError("policy accuracy needs pairs with s != g")
    d0 = env.diameter // 2 if distant_threshold is None else distant_threshold
    actions = np.asarray(agent.greedy_actions(s, g, None))
    hit = env.optimal_action_mask[s, g, actions]
    dist = env.distances[s, g]
    near, far = dist < d0, dist >= d0

    def frac(mask):
        return float(hit[mask].mean()) if mask.any() else float("nan")

    return {
        "overall": float(hit.mean()),
        "near": frac(near),
        "distant": frac(far),
        "n_near": int(near.sum()),
        "n_distant": int(far.sum()),
        "threshold": int(d0),
    }
