"""Closed-form policy-error bounds under proportional value noise, their
Monte-Carlo check on a line, gridworld noise fields, and the argmax
equivalence checker for value-derived goal representations.

Noise model: ``V_hat(s, g) = V*(s, g) * (1 + sigma * z)``, with ``z`` an
independent standard normal draw for every queried pair and ``V*(s, g) = -d(s, g)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .envs import GoalEnv

__all__ = [
    "NoiseModel",
    "TheoryBound",
    "MonteCarloEstimate",
    "ActionMap",
    "EquivalenceReport",
    "std_normal_cdf",
    "flat_error",
    "hier_error_bound",
    "bound_table",
    "optimal_k",
    "monte_carlo_policy_error",
    "noisy_action_map",
    "wrong_arrow_profile",
    "argmax_equivalence_check",
    "random_deterministic_mdp",
    "goal_collapse_construction",
]


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    kind: str = "proportional"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.kind != "proportional":
            raise ValueError(f"unsupported noise kind {self.kind!r}")

    def perturb(self, v_star, rng):
        v_star = np.asarray(v_star, dtype=np.float64)
        if self.sigma == 0:
            return v_star.copy()
        return v_star * (1.0 + self.sigma * rng.standard_normal(v_star.shape))


@dataclass(frozen=True)
class TheoryBound:
    T: int
    k: float
    sigma: float
    flat_error: float
    high_error: float
    low_error: float
    hier_bound: float

    def to_dict(self) -> dict:
        return asdict(self)


def std_normal_cdf(x):
    """Standard normal CDF; accurate to double precision in both tails."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x[~np.isinf(x)]).all():
        raise ValueError("std_normal_cdf needs non-NaN input")
    out = ndtr(x)
    return float(out) if out.ndim == 0 else out


def _wrong_choice(ratio, sigma):
    # P(wrong) when comparing candidates whose distances to the target differ by
    # a factor set by ``ratio`` = (distance to target) / (candidate offset)
    if sigma == 0:
        return 0.0
    return std_normal_cdf(-math.sqrt(2.0) / (sigma * math.sqrt(ratio * ratio + 1.0)))


def flat_error(T, sigma) -> float:
    """``Phi(-sqrt(2) / (sigma * sqrt(T^2 + 1)))``."""
    if T <= 1:
        raise ValueError("T must exceed 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return _wrong_choice(float(T), sigma)


def hier_error_bound(T, sigma, k) -> TheoryBound:
    """High-level term (offset ``k`` toward a goal ``T`` away) plus low-level term
    (unit step toward a subgoal ``k`` away). ``T / k`` need not be an integer."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 1 <= k <= T:
        raise ValueError("k must satisfy 1 <= k <= T")
    high = _wrong_choice(T / k, sigma)
    low = _wrong_choice(float(k), sigma)
    return TheoryBound(
        T=int(T),
        k=k,
        sigma=float(sigma),
        flat_error=flat_error(T, sigma) if T > 1 else 0.0,
        high_error=high,
        low_error=low,
        hier_bound=high + low,
    )


def bound_table(T, sigma, k_values=None) -> list[dict]:
    """Rows ``{k, high, low, bound, flat}`` for each ``k`` (default ``1..T``)."""
    ks = range(1, int(T) + 1) if k_values is None else k_values
    rows = []
    for k in ks:
        b = hier_error_bound(T, sigma, k)
        rows.append({"k": k, "high": b.high_error, "low": b.low_error, "bound": b.hier_bound, "flat": b.flat_error})
    return rows


def optimal_k(T, sigma) -> int:
    """Exhaustive integer argmin of the bound over ``1..T``; ties go to the smaller k."""
    if T <= 1:
        raise ValueError("T must exceed 1")
    best_k, best = 1, math.inf
    for k in range(1, int(T) + 1):
        b = hier_error_bound(T, sigma, k).hier_bound
        if b < best:
            best_k, best = k, b
    return best_k


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    se: float
    trials: int
    errors: int
    high_errors: int | None = None
    low_errors: int | None = None

    def within(self, value: float, n_se: float = 3.0) -> bool:
        return abs(self.estimate - value) <= n_se * self.se


def _line_values(dist):
    return -np.abs(np.asarray(dist, dtype=np.float64))


def _pick_wrong(d_good, d_bad, noise: NoiseModel, trials, rng):
    """Does noisy comparison prefer the candidate at distance ``d_bad`` over ``d_good``?"""
    v_good = noise.perturb(np.full(trials, -float(d_good)), rng)
    v_bad = noise.perturb(np.full(trials, -float(d_bad)), rng)
    return v_bad > v_good


def monte_carlo_policy_error(
    T: int,
    sigma: float,
    mode: str = "flat",
    k: int | None = None,
    trials: int = 100_000,
    rng=None,
    env: GoalEnv | None = None,
) -> MonteCarloEstimate:
    """Empirical wrong-action rate at distance ``T`` from the goal on a line.

    Flat: compare ``V_hat(s+1, g)`` with ``V_hat(s-1, g)``. Hierarchical: the
    high level compares ``s+k`` and ``s-k`` as subgoals for ``g``, the low level
    compares ``s+1`` and ``s-1`` for the chosen subgoal; the trial is wrong
    when the composed step moves away from ``g``. If ``env`` (a chain) is given,
    distances come from its BFS oracle and it must be long enough.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if mode not in ("flat", "hierarchical"):
        raise ValueError("mode must be 'flat' or 'hierarchical'")
    rng = np.random.default_rng(rng)
    noise = NoiseModel(sigma)
    T = int(T)
    if mode == "hierarchical":
        if k is None or not 1 <= int(k) <= T:
            raise ValueError("hierarchical mode needs 1 <= k <= T")
        k = int(k)
    reach = k if mode == "hierarchical" else 1
    if env is not None:
        # start at the middle so that both directions have room
        if env.num_states < 2 * (T + reach) + 1:
            raise ValueError("chain too short for this T and k")
        s = env.num_states // 2 - T // 2 - reach // 2
        s = max(reach, min(s, env.num_states - 1 - T - reach))
        g = s + T
        d = env.distances

        def dist(a, b):
            return int(d[a, b])

    else:
        s, g = 0, T

        def dist(a, b):
            return abs(a - b)

    if mode == "flat":
        wrong = _pick_wrong(dist(s + 1, g), dist(s - 1, g), noise, trials, rng)
        n = int(wrong.sum())
        return MonteCarloEstimate(n / trials, _binomial_se(n, trials), trials, n)
    high_wrong = _pick_wrong(dist(s + k, g), dist(s - k, g), noise, trials, rng)
    # the low level always faces a subgoal k away, on whichever side was picked
    low_wrong = _pick_wrong(dist(s + 1, s + k), dist(s - 1, s + k), noise, trials, rng)
    wrong = high_wrong ^ low_wrong
    n = int(wrong.sum())
    return MonteCarloEstimate(
        n / trials,
        _binomial_se(n, trials),
        trials,
        n,
        high_errors=int(high_wrong.sum()),
        low_errors=int(low_wrong.sum()),
    )


def _binomial_se(n_err, trials):
    p = n_err / trials
    return math.sqrt(p * (1.0 - p) / trials)


# --- gridworld noise fields -------------------------------------------------------------------


@dataclass
class ActionMap:
    goal: int
    sigma: float
    k: int
    seed: int
    flat_actions: np.ndarray
    hier_actions: np.ndarray
    subgoals: np.ndarray
    flat_correct: np.ndarray
    hier_correct: np.ndarray
    distances: np.ndarray
    coords: list = field(default_factory=list)

    def wrong_fraction(self, which: str = "flat", min_distance: int = 1) -> float:
        ok = self.flat_correct if which == "flat" else self.hier_correct
        sel = self.distances >= max(min_distance, 1)
        return float(1.0 - ok[sel].mean()) if sel.any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "goal": int(self.goal),
            "sigma": float(self.sigma),
            "k": int(self.k),
            "seed": int(self.seed),
            "cells": [
                {
                    "state": i,
                    "xy": list(self.coords[i]) if self.coords else None,
                    "distance": int(self.distances[i]),
                    "flat_action": int(self.flat_actions[i]),
                    "hier_action": int(self.hier_actions[i]),
                    "subgoal": int(self.subgoals[i]),
                    "flat_correct": bool(self.flat_correct[i]),
                    "hier_correct": bool(self.hier_correct[i]),
                }
                for i in range(len(self.distances))
            ],
        }


def noisy_action_map(env: GoalEnv, goal: int, sigma: float, seed: int = 0, k: int | None = None) -> ActionMap:
    """Greedy arrows under one sampled noise field, flat and subgoal-then-greedy.

    One noise draw covers every (state, target) pair, so the flat choice and the
    hierarchical choice see the same perturbed table. The hierarchical agent
    picks the best noisy state within ``k`` steps (default ``round(sqrt(diameter))``)
    and then steps greedily toward it. The goal cell itself is reported as correct.
    """
    n = env.num_states
    if not 0 <= goal < n:
        raise ValueError("goal is not a state of this environment")
    k = k or max(1, int(round(math.sqrt(env.diameter))))
    rng = np.random.default_rng(seed)
    d = env.distances
    v_hat = NoiseModel(sigma).perturb(-d.astype(np.float64), rng)
    succ = env.next_state
    flat = np.argmax(v_hat[succ, goal], axis=1)
    cand = np.where((d <= k) & (d > 0), v_hat[:, goal][None, :], -np.inf)
    sub = np.argmax(cand, axis=1)
    sub = np.where(d[:, goal] <= k, goal, sub)
    hier = np.argmax(v_hat[succ, sub[:, None]], axis=1)
    mask = env.optimal_action_mask[np.arange(n), goal]
    at_goal = np.arange(n) == goal
    flat_ok = mask[np.arange(n), flat] | at_goal
    hier_ok = mask[np.arange(n), hier] | at_goal
    coords = [env.coord(i) for i in range(n)] if hasattr(env, "coord") else []
    return ActionMap(goal, float(sigma), int(k), int(seed), flat, hier, sub, flat_ok, hier_ok, d[:, goal].copy(), coords)


def wrong_arrow_profile(env: GoalEnv, goal: int, sigma: float, seeds, k: int | None = None) -> dict:
    """Mean wrong-arrow fraction by distance to ``goal`` over noise seeds."""
    d = env.distances[:, goal]
    bins = np.arange(1, d.max() + 1)
    flat = np.zeros(len(bins))
    hier = np.zeros(len(bins))
    seeds = list(seeds)
    for seed in seeds:
        m = noisy_action_map(env, goal, sigma, seed, k)
        for j, b in enumerate(bins):
            sel = d == b
            flat[j] += 1.0 - m.flat_correct[sel].mean()
            hier[j] += 1.0 - m.hier_correct[sel].mean()
    return {
        "distance": bins.tolist(),
        "flat_wrong": (flat / len(seeds)).tolist(),
        "hier_wrong": (hier / len(seeds)).tolist(),
        "seeds": len(seeds),
        "sigma": float(sigma),
    }


# --- argmax equivalence --------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    passed: bool
    precondition_ok: bool
    pairs_checked: int
    mismatches: list = field(default_factory=list)
    witness: tuple | None = None
    max_precondition_error: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _argmax_set(values, tol):
    best = np.max(values)
    return frozenset(np.flatnonzero(values >= best - tol).tolist())


def argmax_equivalence_check(env: GoalEnv, v_star, phi, v_phi, tol: float = 1e-9) -> EquivalenceReport:
    """Compare neighbour argmax sets under ``V*(., g)`` and ``V_phi(., phi(g))``.

    ``v_star`` is ``[num_states, num_goals]``; ``phi`` maps goal column ``j`` to a
    representation index; ``v_phi`` is either a ``[num_states, num_codes]`` table or a
    callable ``(s, code) -> value``. The precondition ``V_phi(s, phi(g)) = V*(s, g)``
    is verified first and its failure is reported with the worst pair.
    """
    v_star = np.asarray(v_star, dtype=np.float64)
    n, num_goals = v_star.shape
    if n != env.num_states:
        raise ValueError("V* rows must match the number of states")
    codes = np.asarray([phi(j) for j in range(num_goals)] if callable(phi) else phi)
    if len(codes) != num_goals:
        raise ValueError("phi must assign a code to every goal")
    if callable(v_phi):
        ss, jj = np.meshgrid(np.arange(n), np.arange(num_goals), indexing="ij")
        composed = np.array([v_phi(int(s), codes[j]) for s, j in zip(ss.ravel(), jj.ravel())], dtype=np.float64)
        composed = composed.reshape(n, num_goals)
    else:
        composed = np.asarray(v_phi, dtype=np.float64)[:, codes]
    err = np.abs(composed - v_star)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    if err[worst] > tol:
        return EquivalenceReport(
            passed=False,
            precondition_ok=False,
            pairs_checked=0,
            witness=(int(worst[0]), int(worst[1])),
            max_precondition_error=float(err[worst]),
        )
    mismatches = []
    for s in range(n):
        nbrs = np.array(sorted(env.neighbors(s)))
        for j in range(num_goals):
            a = frozenset(nbrs[list(_argmax_set(v_star[nbrs, j], tol))].tolist())
            b = frozenset(nbrs[list(_argmax_set(composed[nbrs, j], tol))].tolist())
            if a != b:
                mismatches.append({"state": s, "goal": j, "oracle": sorted(a), "phi": sorted(b)})
    return EquivalenceReport(
        passed=not mismatches,
        precondition_ok=True,
        pairs_checked=n * num_goals,
        mismatches=mismatches,
        witness=(mismatches[0]["state"], mismatches[0]["goal"]) if mismatches else None,
        max_precondition_error=float(err[worst]),
    )


def random_deterministic_mdp(num_states: int, num_actions: int, rng) -> GoalEnv:
    """Uniformly random successor table (not necessarily strongly connected)."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("need at least one state and one action")
    return GoalEnv(rng.integers(num_states, size=(num_states, num_actions)))


def goal_collapse_construction(env: GoalEnv, alias: int = 0, gamma: float = 0.99):
    """Goal labels ``0..n`` where label ``n`` aliases cell ``alias``.

    The two labels have identical ``V*`` columns and ``phi`` maps both to one code,
    so the representation is lossy on labels but not on values. Returns
    ``(v_star, phi, v_phi)``.
    """
    base = env.optimal_values(gamma)
    n = env.num_states
    v_star = np.concatenate([base, base[:, [alias]]], axis=1)
    phi = np.concatenate([np.arange(n), [alias]])
    return v_star, phi, base
