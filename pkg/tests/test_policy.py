import numpy as np
import pytest

from _fd import max_relative_error, numeric_grads
from hiql.data import Dataset, Trajectory, generate_dataset
from hiql.envs import Chain, Grid, load_map
from hiql.nn import LearnedValue, TabularValue, ValueNet, gradient, params_hash
from hiql.policy import (
    AwrConfig,
    FlatPolicy,
    HighPolicy,
    LowPolicy,
    advantage_flat,
    advantage_high,
    advantage_high_full,
    advantage_low,
    awr_weight,
    train_bc,
    train_flat,
    train_high,
    train_low,
    weighted_nll,
    weighted_sq_error,
)


@pytest.fixture(scope="module")
def chain_value():
    env = Chain(30)
    return env, TabularValue(env.optimal_values(1.0))


def test_flat_advantage_examples(chain_value):
    env, v = chain_value
    # V(s') = -5, V(s) = -6 toward goal 20
    assert advantage_flat(v, [14], [15], [20], 1.0)[0] == pytest.approx(0.0)
    # wrong direction: V(s') = -7
    assert advantage_flat(v, [14], [13], [20], 1.0)[0] == pytest.approx(-2.0)
    # s = g uses the zero-reward branch
    assert advantage_flat(v, [20], [21], [20], 1.0)[0] == pytest.approx(-1.0)


def test_high_and_low_advantage_examples(chain_value):
    env, v = chain_value
    assert advantage_high(v, [3], [3], [25])[0] == 0.0
    assert advantage_high(v, [0], [10], [20])[0] == pytest.approx(10.0)
    assert advantage_high(v, [10], [5], [20])[0] < 0
    assert advantage_low(v, [0], [0], [6])[0] == 0.0
    assert advantage_low(v, [4], [5], [9])[0] == pytest.approx(1.0)
    assert advantage_low(v, [4], [3], [9])[0] == pytest.approx(-1.0)


def test_full_high_advantage_is_shifted_simplified_one(chain_value):
    env, v = chain_value
    # at gamma = 1 the discounted reward sum over k steps toward the goal is -k
    s, sub, g = np.array([0, 2, 5]), np.array([4, 6, 9]), np.array([20, 20, 20])
    full = advantage_high_full(v, s, sub, g, np.full(3, 4), np.full(3, -4.0), 1.0)
    np.testing.assert_allclose(full, advantage_high(v, s, sub, g) - 4.0)


@pytest.mark.parametrize(
    "adv,beta,cap,want", [(0.0, 1.0, 100.0, 1.0), (2.0, 1.0, 100.0, np.exp(2.0)), (10.0, 3.0, 100.0, 100.0)]
)
def test_awr_weight_examples(adv, beta, cap, want):
    assert awr_weight(adv, beta, cap) == pytest.approx(want, rel=1e-12)


def test_awr_weight_positive_capped_and_monotone():
    adv = np.array([-1e4, -3.0, -0.5, 0.0, 0.7, 2.0, 1e4])
    for beta in (0.0, 0.5, 1.0, 4.0):
        w = awr_weight(adv, beta, 100.0)
        assert np.all(w > 0) and np.all(w <= 100.0) and np.all(np.isfinite(w))
    np.testing.assert_array_equal(awr_weight(adv, 0.0), 1.0)
    with pytest.raises(ValueError):
        awr_weight(adv, -1.0)
    # relative weight of the best uncapped item grows with beta
    a = np.array([-2.0, -1.0, 0.0, 0.5])
    ratios = [awr_weight(a, b, 1e9)[-1] / awr_weight(a, b, 1e9)[:-1] for b in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(np.all(r2 >= r1) for r1, r2 in zip(ratios, ratios[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        AwrConfig(beta=-0.1)
    with pytest.raises(ValueError):
        AwrConfig(weight_cap=0.5)


def test_weighted_objective_gradients():
    rng = np.random.default_rng(0)
    logits, target = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    labels, w = rng.integers(4, size=6), rng.uniform(0.1, 5, size=6)
    _, d = weighted_nll(logits, labels, w)
    num = numeric_grads(lambda p: weighted_nll(p["x"], labels, w)[0], {"x": logits.copy()})
    assert max_relative_error({"x": d}, num) <= 1e-4
    _, d = weighted_sq_error(target * 0.3, target, w)
    num = numeric_grads(lambda p: weighted_sq_error(p["x"], target, w)[0], {"x": target * 0.3})
    assert max_relative_error({"x": d}, num) <= 1e-4


def test_weighted_nll_through_policy_network():
    env = Grid(4, 4)
    pol = FlatPolicy(env, hidden=(6,), rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    s, g = rng.integers(16, size=(2, 8))
    a, w = rng.integers(4, size=8), rng.uniform(0.5, 3, size=8)
    x = pol.inputs(s, g)
    _, analytic = gradient(pol.net, pol.params, lambda out: weighted_nll(out, a, w), x)
    num = numeric_grads(lambda p: weighted_nll(pol.net(p, x), a, w)[0], pol.params)
    assert max_relative_error(analytic, num) <= 1e-4


def test_oracle_flat_awr_concentrates_on_optimal_actions():
    """Exhaustive (s, a, g) batch weighted by oracle advantages; the population optimum
    puts at least 1 - 1.4e-4 on optimal actions at beta = 10."""
    env = Grid(5, 5, feature_kind="onehot")
    n, na = env.num_states, env.num_actions
    value = TabularValue(env.optimal_values(0.99))
    s, a, g = (x.ravel() for x in np.meshgrid(np.arange(n), np.arange(na), np.arange(n), indexing="ij"))
    keep = s != g
    s, a, g = s[keep], a[keep], g[keep]
    w = awr_weight(advantage_flat(value, s, env.next_state[s, a], g, 0.99), 10.0)
    pol = FlatPolicy(env, hidden=(64, 64), rng=np.random.default_rng(0))
    x = pol.inputs(s, g)
    for _ in range(400):
        out, cache = pol.net.forward(pol.params, x)
        pol._update(*weighted_nll(out, a, w), cache, 3e-3)
    ss, gg = np.nonzero(~np.eye(n, dtype=bool))
    logits = pol.logits(ss, gg)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    mass = (p * env.optimal_action_mask[ss, gg]).sum(axis=1)
    assert mass.min() >= 0.99


@pytest.fixture(scope="module")
def setup():
    env = load_map("maze11")
    ds = generate_dataset(env, "epsilon_noisy", num_traj=20, max_len=40, seed=0)
    net = ValueNet(env.feature_dim, (16,), (16,), rep_dim=6)
    value = LearnedValue(net, net.init(np.random.default_rng(0)), env)
    return env, ds, value


def test_beta_zero_equals_behavioral_cloning(setup):
    env, ds, value = setup
    cfg = AwrConfig(beta=0.0, steps=20, batch_size=32)
    a = FlatPolicy(env, hidden=(16,), rng=np.random.default_rng(3))
    b = FlatPolicy(env, hidden=(16,), rng=np.random.default_rng(3))
    train_flat(a, value, ds, cfg, np.random.default_rng(4))
    train_bc(b, ds, cfg, np.random.default_rng(4))
    assert params_hash(a.params) == params_hash(b.params)


def test_value_parameters_frozen_during_extraction(setup):
    env, ds, value = setup
    before = params_hash(value.params)
    cfg = AwrConfig(steps=10, batch_size=32)
    train_flat(FlatPolicy(env, hidden=(8,)), value, ds, cfg, np.random.default_rng(0))
    train_high(HighPolicy(env, rep_dim=6, hidden=(8,)), value, ds, cfg, 4, np.random.default_rng(0))
    train_low(LowPolicy(env, rep_dim=6, hidden=(8,)), value, ds, cfg, 4, np.random.default_rng(0))
    train_high(HighPolicy(env, mode="raw", hidden=(8,)), value, ds, cfg, 4, np.random.default_rng(0))
    train_low(LowPolicy(env, mode="raw", hidden=(8,)), value, ds, cfg, 4, np.random.default_rng(0))
    assert params_hash(value.params) == before


def test_repr_grad_trains_only_the_representation(setup):
    env, ds, value = setup
    live = LearnedValue(value.net, dict(value.params), env)
    train_low(LowPolicy(env, rep_dim=6, hidden=(8,)), live, ds, AwrConfig(steps=5, batch_size=16), 3,
              np.random.default_rng(0), repr_grad=True)
    changed = {k for k in value.params if not np.array_equal(value.params[k], live.params[k])}
    assert changed and all(k.startswith("phi.") for k in changed)
    with pytest.raises(ValueError):
        train_low(LowPolicy(env, rep_dim=6), live.freeze(), ds, AwrConfig(steps=1), 3, np.random.default_rng(0),
                  repr_grad=True)


def test_training_is_deterministic(setup):
    env, ds, value = setup

    def run():
        pol = HighPolicy(env, rep_dim=6, hidden=(8,), rng=np.random.default_rng(1))
        trace = train_high(pol, value, ds, AwrConfig(steps=15, batch_size=32), 5, np.random.default_rng(2), log_every=3)
        return trace, params_hash(pol.params)

    assert run() == run()


def test_high_policy_outputs_on_unit_sphere(setup):
    env, _, _ = setup
    pol = HighPolicy(env, rep_dim=6, hidden=(8,), rng=np.random.default_rng(0))
    z = pol.predict(np.arange(10), np.arange(10, 20))
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_low_policy_needs_labeled_data(setup):
    env, ds, value = setup
    bare = Dataset([Trajectory(t.states) for t in ds.trajectories], allow_unlabeled=True)
    with pytest.raises(ValueError):
        train_low(LowPolicy(env, mode="raw"), value, bare, AwrConfig(steps=1), 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_high(HighPolicy(env), TabularValue.zeros(env.num_states), ds, AwrConfig(steps=1), 3,
                   np.random.default_rng(0))
    with pytest.raises(ValueError):
        HighPolicy(env, mode="xyz")
