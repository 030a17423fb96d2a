"""Advantage-weighted policy extraction from a frozen goal-conditioned value.

Three heads share one MLP implementation:

* ``FlatPolicy``  -- categorical ``pi(a | s, g)``
* ``HighPolicy``  -- ``pi_h(subgoal | s, g)``; in ``"repr"`` mode a fixed-variance
  Gaussian mean in representation space, in ``"raw"`` mode categorical over cells
* ``LowPolicy``   -- categorical ``pi_l(a | s, subgoal-or-z)``

Value objects only need ``values(s, g)`` (and ``represent(g, s)`` for the
representation mode); both ``TabularValue`` and ``LearnedValue`` qualify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, sample_flat_batch, sample_high_batch, sample_low_batch
from .nn import MLP, MlpSpec, NonFiniteLossError, adam_init, adam_step

__all__ = [
    "AwrConfig",
    "FlatPolicy",
    "HighPolicy",
    "LowPolicy",
    "advantage_flat",
    "advantage_high",
    "advantage_low",
    "advantage_high_full",
    "advantage_low_full",
    "awr_weight",
    "weighted_nll",
    "weighted_sq_error",
    "train_flat",
    "train_bc",
    "train_high",
    "train_low",
]


@dataclass(frozen=True)
class AwrConfig:
    beta: float = 1.0
    weight_cap: float = 100.0
    lr: float = 3e-4
    steps: int = 5_000
    batch_size: int = 256
    p_future_goal: float = 0.7
    gamma: float = 0.99
    full_advantage: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.weight_cap < 1:
            raise ValueError("weight_cap must be at least 1")


# --- advantages and weights -------------------------------------------------------------


def _reward(s, g):
    return np.where(np.asarray(s) == np.asarray(g), 0.0, -1.0)


def advantage_flat(value, s, s_next, g, gamma):
    """``gamma * V(s', g) + r(s, g) - V(s, g)``."""
    return gamma * value.values(s_next, g) + _reward(s, g) - value.values(s, g)


def advantage_high(value, s, subgoal, g):
    """``V(subgoal, g) - V(s, g)``."""
    return value.values(subgoal, g) - value.values(s, g)


def advantage_low(value, s, s_next, subgoal):
    """``V(s', subgoal) - V(s, subgoal)``."""
    return value.values(s_next, subgoal) - value.values(s, subgoal)


def advantage_high_full(value, s, subgoal, g, k_tilde, reward_sum, gamma):
    """Multi-step estimate including the window's discounted rewards."""
    return gamma ** np.asarray(k_tilde) * value.values(subgoal, g) + reward_sum - value.values(s, g)


def advantage_low_full(value, s, s_next, subgoal, gamma):
    return advantage_flat(value, s, s_next, subgoal, gamma)


_LOG_TINY = float(np.log(np.finfo(np.float64).tiny))


def awr_weight(adv, beta, weight_cap=100.0):
    """``min(exp(beta * A), cap)``, computed without overflow.

    Very negative advantages are floored at the smallest normal float instead of
    underflowing to 0, so every weight stays strictly positive.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    x = beta * np.asarray(adv, dtype=np.float64)
    return np.minimum(np.exp(np.clip(x, _LOG_TINY, np.log(weight_cap))), weight_cap)


# --- losses -------------------------------------------------------------------------------


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_nll(logits, labels, weights):
    """``-mean(w * log softmax(logits)[label])`` and its gradient w.r.t. the logits."""
    logp = _log_softmax(logits)
    n = len(labels)
    picked = logp[np.arange(n), labels]
    loss = -float(np.mean(weights * picked))
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d * (weights / n)[:, None]


def weighted_sq_error(pred, target, weights):
    """``mean(w * ||pred - target||^2 / 2)``: a unit-variance Gaussian log-likelihood."""
    diff = pred - target
    loss = float(np.mean(weights * 0.5 * (diff * diff).sum(axis=1)))
    return loss, diff * (weights / len(weights))[:, None]


# --- policy heads ---------------------------------------------------------------------------


class _Head:
    out_dim: int

    def __init__(self, env, in_dim, out_dim, hidden, rng, layer_norm=True):
        self.env = env
        self.net = MLP(MlpSpec(in_dim, tuple(hidden), out_dim, layer_norm))
        self.params = self.net.init(rng, final_scale=0.01)
        self.opt = adam_init(self.params)

    def _update(self, loss, dout, cache, lr):
        if not np.isfinite(loss):
            raise NonFiniteLossError("policy loss is not finite", loss=loss)
        grads, d_in = self.net.backward(self.params, cache, dout)
        self.params, self.opt = adam_step(self.params, grads, self.opt, lr=lr)
        return d_in


class FlatPolicy(_Head):
    def __init__(self, env, hidden=(64, 64), rng=None, layer_norm=True):
        rng = np.random.default_rng(0) if rng is None else rng
        f = env.feature_dim
        super().__init__(env, 2 * f, env.num_actions, hidden, rng, layer_norm)

    def inputs(self, s, g):
        return np.concatenate([self.env.features(s), self.env.features(g)], axis=1)

    def logits(self, s, g):
        return self.net(self.params, self.inputs(np.atleast_1d(s), np.atleast_1d(g)))

    def greedy(self, s, g):
        return np.argmax(self.logits(s, g), axis=1)


class HighPolicy(_Head):
    def __init__(self, env, mode="repr", rep_dim=10, hidden=(64, 64), rng=None, layer_norm=True):
        if mode not in ("repr", "raw"):
            raise ValueError("high-level mode must be 'repr' or 'raw'")
        rng = np.random.default_rng(0) if rng is None else rng
        self.mode = mode
        out = rep_dim if mode == "repr" else env.num_states
        super().__init__(env, 2 * env.feature_dim, out, hidden, rng, layer_norm)

    def inputs(self, s, g):
        return np.concatenate([self.env.features(s), self.env.features(g)], axis=1)

    def raw_output(self, s, g):
        return self.net(self.params, self.inputs(np.atleast_1d(s), np.atleast_1d(g)))

    def predict(self, s, g):
        """Unit-norm latent subgoals (``repr``) or subgoal cell indices (``raw``)."""
        out = self.raw_output(s, g)
        if self.mode == "raw":
            return np.argmax(out, axis=1)
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.maximum(norm, 1e-12)


class LowPolicy(_Head):
    def __init__(self, env, mode="repr", rep_dim=10, hidden=(64, 64), rng=None, layer_norm=True):
        if mode not in ("repr", "raw"):
            raise ValueError("low-level mode must be 'repr' or 'raw'")
        rng = np.random.default_rng(0) if rng is None else rng
        self.mode = mode
        target_dim = rep_dim if mode == "repr" else env.feature_dim
        super().__init__(env, env.feature_dim + target_dim, env.num_actions, hidden, rng, layer_norm)

    def inputs(self, s, target):
        """``target`` is a latent batch in ``repr`` mode, subgoal indices in ``raw`` mode."""
        s_feat = self.env.features(np.atleast_1d(s))
        t_feat = np.atleast_2d(target) if self.mode == "repr" else self.env.features(np.atleast_1d(target))
        return np.concatenate([s_feat, t_feat], axis=1)

    def logits(self, s, target):
        return self.net(self.params, self.inputs(s, target))

    def greedy(self, s, target):
        return np.argmax(self.logits(s, target), axis=1)


# --- trainers -------------------------------------------------------------------------------


def _record(step, loss, weights, adv):
    return {
        "step": step,
        "loss": loss,
        "weight_mean": float(np.mean(weights)),
        "adv_mean": float(np.mean(adv)) if adv is not None else 0.0,
    }


def _flat_loop(policy: FlatPolicy, weigh, dataset, cfg, rng, log_every, callback=None):
    trace = []
    for step in range(cfg.steps):
        b = sample_flat_batch(dataset, cfg.p_future_goal, cfg.batch_size, rng)
        adv, w = weigh(b)
        out, cache = policy.net.forward(policy.params, policy.inputs(b.s, b.g))
        loss, dout = weighted_nll(out, b.a, w)
        policy._update(loss, dout, cache, cfg.lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            trace.append(_record(step, loss, w, adv))
        if callback is not None:
            callback(step + 1)
    return trace


def train_flat(policy: FlatPolicy, value, dataset: Dataset, cfg: AwrConfig, rng, log_every=100, callback=None):
    """Maximise ``E[exp(beta * A) log pi(a | s, g)]`` with the one-step advantage."""

    def weigh(b):
        adv = advantage_flat(value, b.s, b.s_next, b.g, cfg.gamma)
        return adv, awr_weight(adv, cfg.beta, cfg.weight_cap)

    return _flat_loop(policy, weigh, dataset, cfg, rng, log_every, callback)


def train_bc(policy: FlatPolicy, dataset: Dataset, cfg: AwrConfig, rng, log_every=100, callback=None):
    """Goal-conditioned behavioural cloning (unit weights, no value function)."""
    return _flat_loop(policy, lambda b: (None, np.ones(len(b))), dataset, cfg, rng, log_every, callback)


def train_high(policy: HighPolicy, value, dataset: Dataset, cfg: AwrConfig, k: int, rng, log_every=100, callback=None):
    """Weighted regression onto ``k``-step subgoals (latent targets or raw cells)."""
    if policy.mode == "repr" and not getattr(value, "has_representation", False):
        raise ValueError("representation-mode high-level policy needs a value with a representation head")
    trace = []
    for step in range(cfg.steps):
        b = sample_high_batch(dataset, k, cfg.p_future_goal, cfg.batch_size, rng, gamma=cfg.gamma)
        if cfg.full_advantage:
            adv = advantage_high_full(value, b.s, b.subgoal, b.g, b.k_tilde, b.reward_sum, cfg.gamma)
        else:
            adv = advantage_high(value, b.s, b.subgoal, b.g)
        w = awr_weight(adv, cfg.beta, cfg.weight_cap)
        out, cache = policy.net.forward(policy.params, policy.inputs(b.s, b.g))
        if policy.mode == "repr":
            loss, dout = weighted_sq_error(out, value.represent(b.subgoal, b.s), w)
        else:
            loss, dout = weighted_nll(out, b.subgoal, w)
        policy._update(loss, dout, cache, cfg.lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            trace.append(_record(step, loss, w, adv))
        if callback is not None:
            callback(step + 1)
    return trace


def train_low(
    policy: LowPolicy,
    value,
    dataset: Dataset,
    cfg: AwrConfig,
    k: int,
    rng,
    log_every=100,
    repr_grad: bool = False,
    callback=None,
):
    """Weighted action regression toward ``min(t+k, T)`` subgoals on labeled data.

    With ``repr_grad`` the low-level loss also trains the value network's
    representation head (the value parameters are then no longer frozen).
    """
    if len(dataset.labeled_transitions) == 0:
        raise ValueError("low-level extraction needs action-labeled trajectories")
    if policy.mode == "repr" and not getattr(value, "has_representation", False):
        raise ValueError("representation-mode low-level policy needs a value with a representation head")
    if repr_grad and policy.mode != "repr":
        raise ValueError("repr_grad only applies to representation mode")
    if repr_grad and not hasattr(value, "net"):
        raise ValueError("repr_grad needs a live network value, not a frozen table")
    phi_opt = None
    if repr_grad:
        phi_opt = adam_init({k_: v for k_, v in value.params.items() if k_.startswith("phi.")})
    trace = []
    for step in range(cfg.steps):
        b = sample_low_batch(dataset, k, cfg.batch_size, rng)
        if cfg.full_advantage:
            adv = advantage_low_full(value, b.s, b.s_next, b.subgoal, cfg.gamma)
        else:
            adv = advantage_low(value, b.s, b.s_next, b.subgoal)
        w = awr_weight(adv, cfg.beta, cfg.weight_cap)
        if repr_grad:
            env = policy.env
            z, rep_cache = value.net.represent(
                value.params, env.features(b.subgoal), env.features(b.s), return_cache=True
            )
            x = policy.inputs(b.s, z)
        elif policy.mode == "repr":
            x = policy.inputs(b.s, value.represent(b.subgoal, b.s))
        else:
            x = policy.inputs(b.s, b.subgoal)
        out, cache = policy.net.forward(policy.params, x)
        loss, dout = weighted_nll(out, b.a, w)
        d_in = policy._update(loss, dout, cache, cfg.lr)
        if repr_grad:
            dz = d_in[:, policy.env.feature_dim :]
            grads = value.net.represent_backward(value.params, rep_cache, dz)
            value.params, phi_opt = adam_step(value.params, grads, phi_opt, lr=cfg.lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            trace.append(_record(step, loss, w, adv))
        if callback is not None:
            callback(step + 1)
    return trace
