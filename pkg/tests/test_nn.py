import numpy as np
import pytest

from _fd import max_relative_error, numeric_grads
from hiql.envs import Grid
from hiql.nn import (
    MLP,
    FrozenValue,
    LearnedValue,
    MlpSpec,
    NonFiniteLossError,
    TabularValue,
    ValueNet,
    adam_init,
    adam_step,
    gelu,
    gradient,
    load_params,
    params_hash,
    polyak_update,
    save_params,
)


def sq_loss(target):
    def fn(out):
        diff = out - target
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1))), diff / len(diff)

    return fn


def test_zero_network_outputs_zero():
    net = MLP(MlpSpec(3, (4, 4), 2))
    params = {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(0)).items()}
    np.testing.assert_array_equal(net(params, np.ones((5, 3))), 0.0)


def test_identity_linear_layer():
    net = MLP(MlpSpec(3, (), 3))
    params = {"w0": np.eye(3), "b0": np.zeros(3)}
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(net(params, x), x)


def test_forward_deterministic_and_shape_checked():
    net = MLP(MlpSpec(3, (8,), 2))
    params = net.init(np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((6, 3))
    assert np.array_equal(net(params, x), net(params, x))
    with pytest.raises(ValueError):
        net(params, np.zeros((6, 4)))
    with pytest.raises(ValueError):
        MlpSpec(3, (0,), 2)


def test_gelu_matches_tanh_form_reference():
    torch = pytest.importorskip("torch")
    x = np.linspace(-6, 6, 101)
    ref = torch.nn.functional.gelu(torch.tensor(x), approximate="tanh").numpy()
    np.testing.assert_allclose(gelu(x), ref, atol=1e-12)


def test_constant_loss_zero_gradient():
    net = MLP(MlpSpec(2, (4,), 1))
    params = net.init(np.random.default_rng(0))
    loss, grads = gradient(net, params, lambda out: (3.0, np.zeros_like(out)), np.ones((3, 2)))
    assert loss == 3.0
    assert all(np.all(g == 0) for g in grads.values())


def test_scalar_quadratic_gradient():
    net = MLP(MlpSpec(1, (), 1))
    params = {"w0": np.array([[1.0]]), "b0": np.zeros(1)}
    _, grads = gradient(net, params, lambda out: (0.5 * float((out[0, 0] - 3) ** 2), out - 3), np.ones((1, 1)))
    assert grads["w0"][0, 0] == pytest.approx(-2.0)


def test_non_finite_loss_raises_with_diagnostics():
    net = MLP(MlpSpec(1, (), 1))
    params = {"w0": np.array([[1.0]]), "b0": np.zeros(1)}
    with pytest.raises(NonFiniteLossError) as err:
        gradient(net, params, lambda out: (float("nan"), out), np.ones((1, 1)))
    assert "max_abs_param" in err.value.diagnostics


@pytest.mark.parametrize("layer_norm", [True, False])
@pytest.mark.parametrize("hidden", [(), (5,), (6, 4)])
def test_mlp_gradient_finite_differences(layer_norm, hidden):
    rng = np.random.default_rng(len(hidden) + 10 * layer_norm)
    net = MLP(MlpSpec(3, hidden, 2, layer_norm))
    params = net.init(rng)
    x = rng.standard_normal((7, 3))
    target = rng.standard_normal((7, 2))
    loss_fn = sq_loss(target)
    _, analytic = gradient(net, params, loss_fn, x)
    numeric = numeric_grads(lambda p: loss_fn(net(p, x))[0], params)
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_mlp_input_gradient():
    rng = np.random.default_rng(3)
    net = MLP(MlpSpec(3, (5,), 2))
    params = net.init(rng)
    x = rng.standard_normal((4, 3))
    target = rng.standard_normal((4, 2))
    out, cache = net.forward(params, x)
    _, dout = sq_loss(target)(out)
    _, dx = net.backward(params, cache, dout)
    num = numeric_grads(lambda p: sq_loss(target)(net(params, p["x"]))[0], {"x": x.copy()})
    assert max_relative_error({"x": dx}, num) <= 1e-4


@pytest.mark.parametrize("phi_input", ["gs", "g", "diff", None])
def test_value_net_gradient(phi_input):
    rng = np.random.default_rng(4)
    net = ValueNet(3, trunk_hidden=(6, 5), phi_hidden=(5,), rep_dim=4, phi_input=phi_input)
    params = net.init(rng)
    s, g = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    target = rng.standard_normal(6)

    def loss_of(p):
        v = net(p, s, g)
        return 0.5 * float(np.mean((v - target) ** 2))

    v, cache = net.forward(params, (s, g))
    analytic = net.backward(params, cache, (v - target) / len(v))
    assert max_relative_error(analytic, numeric_grads(loss_of, params)) <= 1e-4


def test_representation_is_unit_norm_and_deterministic():
    rng = np.random.default_rng(5)
    net = ValueNet(4, (8,), (8,), rep_dim=10)
    params = net.init(rng)
    g, s = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    z = net.represent(params, g, s)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(z, net.represent(params, g, s))
    assert z.shape == (20, 10)
    # zero output is floored rather than producing NaN
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    assert np.isfinite(net.represent(zero, g, s)).all()


def test_represent_backward_finite_differences():
    rng = np.random.default_rng(6)
    net = ValueNet(3, (4,), (6,), rep_dim=5)
    params = net.init(rng)
    g, s = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 5))

    def loss_of(p):
        z = net.represent(p, g, s)
        return 0.5 * float(np.sum((z - target) ** 2)) / 5

    z, cache = net.represent(params, g, s, return_cache=True)
    analytic = net.represent_backward(params, cache, (z - target) / 5)
    phi_params = {k: v for k, v in params.items() if k.startswith("phi.")}
    num = numeric_grads(lambda p: loss_of({**params, **p}), phi_params)
    assert max_relative_error(analytic, num) <= 1e-4


def test_layer_norm_statistics():
    rng = np.random.default_rng(7)
    net = MLP(MlpSpec(5, (16, 16), 1))
    params = net.init(rng)
    for xhat in net.layer_norm_outputs(params, rng.standard_normal((32, 5))):
        np.testing.assert_allclose(xhat.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(xhat.var(axis=1), 1.0, atol=1e-6)


def test_adam_first_step_and_zero_gradient():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = adam_init(params)
    new, state = adam_step(params, {"w": np.array([0.5, -1e-3, 10.0])}, state, lr=1e-3)
    np.testing.assert_allclose(np.abs(new["w"] - params["w"]), 1e-3, rtol=1e-4)
    p, s = dict(params), adam_init(params)
    for _ in range(10):
        p, s = adam_step(p, {"w": np.zeros(3)}, s)
    np.testing.assert_array_equal(p["w"], params["w"])


def test_adam_matches_reference_optimizer():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(8)
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    tp = [torch.tensor(params["a"].copy(), requires_grad=True), torch.tensor(params["b"].copy(), requires_grad=True)]
    opt = torch.optim.Adam(tp, lr=3e-4, betas=(0.9, 0.999), eps=1e-8)
    state = adam_init(params)
    for _ in range(25):
        grads = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
        params, state = adam_step(params, grads, state)
        tp[0].grad, tp[1].grad = torch.tensor(grads["a"]), torch.tensor(grads["b"])
        opt.step()
    np.testing.assert_allclose(params["a"], tp[0].detach().numpy(), atol=1e-12)
    np.testing.assert_allclose(params["b"], tp[1].detach().numpy(), atol=1e-12)


def test_adam_shape_mismatch():
    state = adam_init({"w": np.zeros(3)})
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, state)


def test_polyak_examples_and_contraction():
    t, o = {"w": np.zeros(3)}, {"w": np.ones(3)}
    np.testing.assert_allclose(polyak_update(t, o, 0.005)["w"], 0.005)
    np.testing.assert_array_equal(polyak_update(t, o, 1.0)["w"], o["w"])
    np.testing.assert_array_equal(polyak_update(t, o, 0.0)["w"], t["w"])
    rng = np.random.default_rng(9)
    t, o = {"w": rng.standard_normal(10)}, {"w": rng.standard_normal(10)}
    new = polyak_update(t, o, 0.3)
    np.testing.assert_allclose(np.abs(new["w"] - o["w"]), 0.7 * np.abs(t["w"] - o["w"]), atol=1e-15)


def test_checkpoint_roundtrip_is_exact(tmp_path):
    net = ValueNet(3, (4,), (4,), rep_dim=3)
    params = net.init(np.random.default_rng(10))
    save_params(tmp_path / "a.zip", params, {"kind": "value"})
    save_params(tmp_path / "b.zip", params, {"kind": "value"})
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    back, header = load_params(tmp_path / "a.zip")
    assert header == {"kind": "value"}
    assert params_hash(back) == params_hash(params)
    for k in params:
        assert back[k].dtype == np.float64 and np.array_equal(back[k], params[k])


def test_frozen_value_matches_live_network():
    env = Grid(3, 3)
    net = ValueNet(env.feature_dim, (8,), (8,), rep_dim=4)
    live = LearnedValue(net, net.init(np.random.default_rng(11)), env)
    frozen = live.freeze()
    s, g = np.array([0, 4, 8, 2]), np.array([3, 4, 1, 7])
    np.testing.assert_allclose(frozen.values(s, g), live.values(s, g), atol=1e-12)
    np.testing.assert_allclose(frozen.represent(g, s), live.represent(g, s), atol=1e-12)
    np.testing.assert_allclose(frozen.table, live.table(), atol=1e-12)


def test_tabular_value_validation():
    with pytest.raises(ValueError):
        TabularValue(np.array([np.nan]))
    t = TabularValue.zeros(3)
    assert t.values([0, 1], [2, 2]).tolist() == [0.0, 0.0]
    assert not t.has_representation
    assert not FrozenValue(np.zeros((2, 2))).has_representation
