"""Action-free goal-conditioned IQL: expectile regression onto TD targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, GoalSamplingConfig, ValueBatch, sample_value_batch
from .nn import NonFiniteLossError, ValueNet, adam_init, adam_step, polyak_update

__all__ = [
    "IqlConfig",
    "ValueTrainState",
    "expectile_loss",
    "expectile_weight",
    "expectile_value_loss",
    "td_targets",
    "value_update",
    "expectile_of",
    "tabular_expectile_backup",
    "dataset_successors",
    "train_value",
]

DIVERGENCE_GUARD = 1e6


@dataclass(frozen=True)
class IqlConfig:
    expectile: float = 0.7
    gamma: float = 0.99
    lr: float = 3e-4
    target_rho: float = 0.005
    steps: int = 10_000
    batch_size: int = 256
    p_random: float = 0.3
    p_future: float = 0.5
    p_current: float = 0.2

    def __post_init__(self):
        if not 0.5 <= self.expectile < 1.0:
            raise ValueError("expectile must lie in [0.5, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def goal_sampling(self) -> GoalSamplingConfig:
        return GoalSamplingConfig(self.p_random, self.p_future, self.p_current, self.gamma)


def expectile_weight(x, tau):
    return np.where(np.asarray(x) < 0, 1.0 - tau, tau)


def expectile_loss(x, tau):
    """``|tau - 1(x < 0)| * x**2``."""
    x = np.asarray(x, dtype=np.float64)
    return expectile_weight(x, tau) * x * x


@dataclass
class ValueTrainState:
    net: ValueNet
    params: dict
    target: dict
    opt: dict

    @classmethod
    def create(cls, net: ValueNet, rng):
        params = net.init(rng)
        return cls(net, params, dict(params), adam_init(params))


def td_targets(net: ValueNet, target_params, env, batch: ValueBatch, gamma: float) -> np.ndarray:
    """``r + gamma * V_target(s', g)``, or exactly 0 on goal-terminal items.

    Evaluated with the target parameters only; the result is a constant for the
    gradient step.
    """
    terminal = batch.s == batch.g
    boot = net(target_params, env.features(batch.s_next), env.features(batch.g))
    return np.where(terminal, 0.0, batch.r + gamma * boot)


def expectile_value_loss(net: ValueNet, params, inputs, targets, tau: float):
    """Mean expectile loss of ``targets - V(s, g)`` and its parameter gradient.

    ``targets`` are constants (already computed from the target network).
    """
    v, cache = net.forward(params, inputs)
    diff = targets - v
    w = expectile_weight(diff, tau)
    loss = float(np.mean(w * diff * diff))
    dv = -2.0 * w * diff / len(diff)
    return loss, net.backward(params, cache, dv), v


def value_update(state: ValueTrainState, env, batch: ValueBatch, cfg: IqlConfig) -> float:
    """One Adam step on the mean expectile loss of the TD residual."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = td_targets(state.net, state.target, env, batch, cfg.gamma)
    inputs = (env.features(batch.s), env.features(batch.g))
    loss, grads, v = expectile_value_loss(state.net, state.params, inputs, targets, cfg.expectile)
    if not np.isfinite(loss) or abs(loss) > DIVERGENCE_GUARD:
        raise NonFiniteLossError(
            "value loss diverged",
            loss=loss,
            v_min=float(np.min(v)),
            v_max=float(np.max(v)),
            target_min=float(np.min(targets)),
            target_max=float(np.max(targets)),
        )
    state.params, state.opt = adam_step(state.params, grads, state.opt, lr=cfg.lr)
    return loss


def train_value(state: ValueTrainState, env, dataset: Dataset, cfg: IqlConfig, rng, log_every: int = 100):
    """Sample -> expectile step -> Polyak target update, ``cfg.steps`` times.

    Returns the loss trace as a list of records (every ``log_every`` steps).
    """
    if dataset.num_transitions == 0:
        raise ValueError("dataset has no transitions")
    goal_cfg = cfg.goal_sampling
    trace = []
    for step in range(cfg.steps):
        batch = sample_value_batch(dataset, goal_cfg, cfg.batch_size, rng)
        loss = value_update(state, env, batch, cfg)
        state.target = polyak_update(state.target, state.params, cfg.target_rho)
        if step % log_every == 0 or step == cfg.steps - 1:
            v = state.net(state.params, env.features(batch.s), env.features(batch.g))
            trace.append(
                {
                    "step": step,
                    "loss": loss,
                    "v_mean": float(v.mean()),
                    "v_min": float(v.min()),
                    "v_max": float(v.max()),
                }
            )
    return trace


# --- exact tabular learner --------------------------------------------------------------


def expectile_of(y, weights, tau):
    """Exact ``tau``-expectile of a weighted sample, along axis 0.

    The first-order condition is piecewise linear in the location, so each
    region between consecutive sorted samples has a closed-form candidate and
    exactly one of them is self-consistent.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), y.shape)
    order = np.argsort(y, axis=0, kind="stable")
    ys = np.take_along_axis(y, order, axis=0)
    ws = np.take_along_axis(w, order, axis=0)
    zero = np.zeros((1,) + ys.shape[1:])
    # prefix sums over the "below" part; candidate i puts the first i samples below
    lo_w = np.concatenate([zero, np.cumsum(ws, axis=0)])
    lo_wy = np.concatenate([zero, np.cumsum(ws * ys, axis=0)])
    hi_w = lo_w[-1] - lo_w
    hi_wy = lo_wy[-1] - lo_wy
    cand = ((1.0 - tau) * lo_wy + tau * hi_wy) / ((1.0 - tau) * lo_w + tau * hi_w)
    n = ys.shape[0]
    left = np.concatenate([np.full((1,) + ys.shape[1:], -np.inf), ys])
    right = np.concatenate([ys, np.full((1,) + ys.shape[1:], np.inf)])
    scale = np.maximum(1.0, np.abs(cand))
    ok = (cand >= left - 1e-12 * scale) & (cand <= right + 1e-12 * scale)
    ok[np.isnan(cand)] = False
    pick = np.argmax(ok, axis=0)
    return np.take_along_axis(cand, pick[None], axis=0)[0] if n else np.zeros(ys.shape[1:])


def dataset_successors(dataset: Dataset, num_states: int):
    """Observed-successor lists per state as padded ``(succ, counts)`` arrays.

    States never seen as a transition source get a self-loop so that they act
    as absorbing non-goal states.
    """
    src = dataset.states[dataset.starts[dataset.trans_traj] + dataset.trans_t]
    dst = dataset.states[dataset.starts[dataset.trans_traj] + dataset.trans_t + 1]
    pairs, counts = np.unique(np.stack([src, dst], axis=1), axis=0, return_counts=True)
    per_state = [[] for _ in range(num_states)]
    for (s, sn), c in zip(pairs, counts):
        per_state[s].append((sn, c))
    width = max(1, max(len(p) for p in per_state))
    succ = np.zeros((num_states, width), dtype=np.int64)
    weight = np.zeros((num_states, width))
    for s, lst in enumerate(per_state):
        if not lst:
            lst = [(s, 1)]
        for j, (sn, c) in enumerate(lst):
            succ[s, j], weight[s, j] = sn, c
        succ[s, len(lst) :] = lst[0][0]
    return succ, weight


def tabular_expectile_backup(
    num_states: int,
    dataset: Dataset,
    expectile: float,
    gamma: float,
    tol: float = 1e-10,
    max_sweeps: int = 100_000,
    table=None,
    num_goals: int | None = None,
    goal_of=None,
):
    """Iterate the expectile Bellman operator on ``V[s, g]`` to its fixed point.

    Each sweep replaces every off-goal cell by the exact expectile of
    ``{-1 + gamma * V[s', g]}`` over the observed successors ``s'`` of ``s``
    (weighted by counts); goal cells stay at 0.
    """
    if not 0.5 <= expectile < 1.0:
        raise ValueError("expectile must lie in [0.5, 1)")
    succ, weight = dataset_successors(dataset, num_states)
    num_goals = num_goals or num_states
    goal_cells = np.arange(num_goals) if goal_of is None else np.asarray(goal_of)
    at_goal = np.arange(num_states)[:, None] == goal_cells[None, :]
    v = np.zeros((num_states, num_goals)) if table is None else np.array(table, dtype=np.float64)
    v[at_goal] = 0.0
    w = np.transpose(np.broadcast_to(weight[:, :, None], succ.shape + (num_goals,)), (1, 0, 2))
    for sweep in range(max_sweeps):
        y = -1.0 + gamma * v[succ]  # [s, j, g]
        new = expectile_of(np.transpose(y, (1, 0, 2)), w, expectile)
        new[at_goal] = 0.0
        change = np.max(np.abs(new - v))
        v = new
        if change < tol:
            return v, sweep + 1
    raise RuntimeError(f"tabular expectile backup did not converge in {max_sweeps} sweeps")
