import math

import mpmath as mp
import numpy as np
import pytest

from hiql.envs import Chain, Grid, load_map
from hiql.theory import (
    NoiseModel,
    argmax_equivalence_check,
    bound_table,
    flat_error,
    goal_collapse_construction,
    hier_error_bound,
    monte_carlo_policy_error,
    noisy_action_map,
    optimal_k,
    random_deterministic_mdp,
    std_normal_cdf,
    wrong_arrow_profile,
)

mp.mp.dps = 40


def mp_wrong(ratio, sigma):
    return float(mp.ncdf(-mp.sqrt(2) / (mp.mpf(sigma) * mp.sqrt(mp.mpf(ratio) ** 2 + 1))))


def mp_bound(T, sigma, k):
    return mp_wrong(mp.mpf(T) / k, sigma) + mp_wrong(k, sigma)


def mp_optimal_k(T, sigma):
    return min(range(1, T + 1), key=lambda k: (mp_bound(T, sigma, k), k))


def test_cdf_against_high_precision_oracle():
    xs = np.concatenate([np.linspace(-38, 8, 400), [-1.96, 0.0, 1e-300, -1e-300]])
    got = std_normal_cdf(xs)
    want = np.array([float(mp.ncdf(mp.mpf(float(x)))) for x in xs])
    assert np.max(np.abs(got - want)) <= 1e-12
    # relative accuracy in the lower tail too
    tail = (xs < -5) & (xs > -30)  # above the subnormal range
    np.testing.assert_allclose(got[tail], want[tail], rtol=1e-12)
    assert std_normal_cdf(0.0) == 0.5
    assert std_normal_cdf(-1.96) == pytest.approx(0.024998, abs=1e-6)
    x = np.random.default_rng(0).normal(scale=4, size=1000)
    np.testing.assert_allclose(std_normal_cdf(x) + std_normal_cdf(-x), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        std_normal_cdf(np.nan)


def test_flat_error_examples_and_monotonicity():
    assert flat_error(2, 1.0) == pytest.approx(mp_wrong(2, 1.0), abs=1e-14)
    assert flat_error(2, 1.0) == pytest.approx(0.2635, abs=5e-5)
    assert flat_error(10, 0.0) == 0.0
    assert flat_error(10, 1e-3) < 1e-300 or flat_error(10, 1e-3) == 0.0
    assert flat_error(20, 0.5) > flat_error(10, 0.5)
    sig = np.linspace(0.05, 2, 40)
    assert np.all(np.diff([flat_error(16, s) for s in sig]) > 0)
    assert np.all(np.diff([flat_error(T, 0.3) for T in range(2, 60)]) > 0)
    with pytest.raises(ValueError):
        flat_error(1, 0.5)


def test_hier_bound_examples():
    b = hier_error_bound(16, 0.5, 4)
    assert b.high_error == pytest.approx(b.low_error, abs=1e-15)
    assert b.hier_bound == pytest.approx(mp_bound(16, 0.5, 4), abs=1e-14)
    assert b.hier_bound == pytest.approx(0.4928, abs=1e-4)
    assert b.hier_bound == b.high_error + b.low_error
    assert hier_error_bound(16, 0.0, 4).hier_bound == 0.0
    for T, k1, k2 in ((16, 2, 8), (36, 4, 9), (64, 8, 8), (100, 5, 20)):
        assert hier_error_bound(T, 0.4, k1).hier_bound == pytest.approx(hier_error_bound(T, 0.4, k2).hier_bound, abs=1e-15)
    # each term is no larger than the flat error strictly inside the range
    for T in (8, 30, 64):
        for sigma in (0.2, 0.7):
            f = flat_error(T, sigma)
            for k in range(2, T):
                b = hier_error_bound(T, sigma, k)
                assert b.high_error <= f and b.low_error <= f
    with pytest.raises(ValueError):
        hier_error_bound(8, 0.5, 9)


def test_bound_table_matches_oracle():
    rows = bound_table(12, 0.3)
    assert [r["k"] for r in rows] == list(range(1, 13))
    for r in rows:
        assert r["bound"] == pytest.approx(mp_bound(12, 0.3, r["k"]), abs=1e-14)
        assert r["flat"] == pytest.approx(mp_wrong(12, 0.3), abs=1e-14)


# argmin values in the Fig. 4 style sweep, from the mpmath oracle; the larger ones
# sit far from sqrt(T) because small k pays the low-level term only once
OPTIMAL_K = {
    (8, 0.2): 3, (8, 0.5): 3, (8, 1.0): 1,
    (64, 0.2): 15, (64, 0.5): 1, (64, 1.0): 1,
    (256, 0.2): 103, (256, 0.5): 1, (256, 1.0): 1,
}


def test_optimal_k_against_oracle():
    for (T, sigma), k in OPTIMAL_K.items():
        assert mp_optimal_k(T, sigma) == k
        assert optimal_k(T, sigma) == k
    for sigma in (0.1, 0.2, 0.5):
        assert optimal_k(4, sigma) == 2
    # ties go to the smaller k: at sigma = 0 every k gives 0
    assert optimal_k(9, 0.0) == 1


def test_monte_carlo_flat_matches_closed_form():
    est = monte_carlo_policy_error(2, 1.0, "flat", trials=100_000, rng=0)
    assert est.within(flat_error(2, 1.0), 3)
    assert abs(est.estimate - 0.2635) <= 3 * est.se


def test_monte_carlo_convergence_rate():
    p = flat_error(8, 0.5)
    for trials in (1_000, 10_000, 100_000):
        devs = [monte_carlo_policy_error(8, 0.5, "flat", trials=trials, rng=seed).estimate - p for seed in range(20)]
        se = math.sqrt(p * (1 - p) / trials)
        # RMS deviation across seeds is close to one binomial standard error
        assert 0.5 * se <= np.sqrt(np.mean(np.square(devs))) <= 1.6 * se


def test_monte_carlo_hierarchy_respects_union_bound():
    for T, sigma, k in ((8, 0.5, 2), (16, 0.3, 4), (30, 1.0, 5)):
        est = monte_carlo_policy_error(T, sigma, "hierarchical", k=k, trials=50_000, rng=1)
        assert est.estimate <= hier_error_bound(T, sigma, k).hier_bound + 3 * est.se
        assert est.high_errors / est.trials == pytest.approx(hier_error_bound(T, sigma, k).high_error, abs=0.01)


def test_monte_carlo_zero_noise_and_chain_env():
    for mode, k in (("flat", None), ("hierarchical", 3)):
        assert monte_carlo_policy_error(10, 0.0, mode, k=k, trials=1000, rng=0).errors == 0
    on_chain = monte_carlo_policy_error(6, 0.7, "flat", trials=20_000, rng=3, env=Chain(40))
    on_line = monte_carlo_policy_error(6, 0.7, "flat", trials=20_000, rng=3)
    assert on_chain.estimate == on_line.estimate
    with pytest.raises(ValueError):
        monte_carlo_policy_error(6, 0.7, "flat", trials=10, env=Chain(5))
    with pytest.raises(ValueError):
        monte_carlo_policy_error(6, 0.7, "hierarchical", k=None)
    with pytest.raises(ValueError):
        monte_carlo_policy_error(6, 0.7, trials=0)


def test_noise_model():
    v = -np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(NoiseModel(0.0).perturb(v, np.random.default_rng(0)), v)
    out = NoiseModel(0.5).perturb(v, np.random.default_rng(0))
    np.testing.assert_array_equal(out[v == 0], 0.0)
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_noisy_action_map_properties():
    env = load_map("maze15")
    goal = env.num_states - 1
    clean = noisy_action_map(env, goal, 0.0, seed=0)
    assert clean.flat_correct.all() and clean.hier_correct.all()
    d = clean.to_dict()
    assert len(d["cells"]) == env.num_states and d["cells"][0]["xy"] is not None
    prof = wrong_arrow_profile(env, goal, 0.5, range(100))
    far = np.array(prof["distance"]) >= env.diameter // 2
    flat, hier = np.array(prof["flat_wrong"]), np.array(prof["hier_wrong"])
    # wrong arrows become more common further from the goal
    assert flat[far].mean() > flat[~far].mean()
    assert np.corrcoef(prof["distance"], flat)[0, 1] > 0.5
    assert hier[far].mean() < flat[far].mean()


def test_argmax_equivalence_identity_and_random_mdps():
    env = Grid(4, 4)
    v = env.optimal_values(0.9)
    rep = argmax_equivalence_check(env, v, np.arange(16), v)
    assert rep.passed and rep.pairs_checked == 16 * 16
    rng = np.random.default_rng(0)
    for _ in range(50):
        mdp = random_deterministic_mdp(int(rng.integers(3, 21)), int(rng.integers(2, 5)), rng)
        v = mdp.optimal_values(0.9)
        perm = rng.permutation(mdp.num_states)
        table = np.empty_like(v)
        table[:, perm] = v  # code perm[g] stores column g
        rep = argmax_equivalence_check(mdp, v, perm, table)
        assert rep.precondition_ok and rep.passed and not rep.mismatches


def test_argmax_equivalence_goal_collapse_and_callable():
    env = load_map("maze11")
    v_star, phi, v_phi = goal_collapse_construction(env, alias=5, gamma=0.9)
    rep = argmax_equivalence_check(env, v_star, phi, v_phi)
    assert rep.passed and rep.pairs_checked == env.num_states * (env.num_states + 1)
    small = Chain(6)
    v = small.optimal_values(0.9)
    rep = argmax_equivalence_check(small, v, lambda j: j, lambda s, c: v[s, c])
    assert rep.passed


def test_argmax_equivalence_precondition_failure_has_witness():
    env = Grid(3, 3)
    v = env.optimal_values(0.9)
    broken = v.copy()
    broken[4, 7] += 1e-6
    rep = argmax_equivalence_check(env, v, np.arange(9), broken)
    assert not rep.passed and not rep.precondition_ok
    assert rep.witness == (4, 7)
    assert rep.max_precondition_error == pytest.approx(1e-6, rel=1e-6)
