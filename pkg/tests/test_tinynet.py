import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gengap import tinynet as tn
from gengap.tinynet import NetHparams

from gradcheck import activation_grad_fd, max_rel_error, param_grad_pair, random_net


def test_glorot_bound_and_range():
    assert tn.glorot_bound(4, 8) == pytest.approx(math.sqrt(0.5))
    assert tn.glorot_bound(4, 8) == pytest.approx(0.70711, abs=1e-5)
    net = tn.init(NetHparams((8, 16, 4)), init_seed=3)
    for name, shape in net.layout:
        if name.startswith("W"):
            assert np.all(np.abs(net.params[name]) <= tn.glorot_bound(*shape))


def test_init_biases_zero_and_bn_defaults():
    net = tn.init(NetHparams((4, 8), batch_norm=True), 0)
    for name, arr in net.params.items():
        if name.startswith("b") or name.startswith("beta"):
            assert np.all(arr == 0)
        if name.startswith("gamma"):
            assert np.all(arr == 1)
    assert all(np.all(v == 0) for k, v in net.moving.items() if k.startswith("mean"))
    assert all(np.all(v == 1) for k, v in net.moving.items() if k.startswith("var"))


def test_init_deterministic():
    hp = NetHparams((16, 4), batch_norm=True)
    assert np.array_equal(tn.init(hp, 11).theta, tn.init(hp, 11).theta)
    assert not np.array_equal(tn.init(hp, 11).theta, tn.init(hp, 12).theta)


def test_zero_network_outputs_zero():
    net = tn.init(NetHparams((4, 4)), 0)
    net.theta[...] = 0
    assert np.all(tn.predict(net, np.array([[0.3, -0.7], [5.0, 2.0]])) == 0)


def test_hand_computed_forward():
    net = tn.init(NetHparams((4,)), 0)
    net.params["W0"][...] = [[1, -1, 2, 0], [0, 1, -1, 3]]
    net.params["b0"][...] = [0, 1, 0, -1]
    net.params["W1"][...] = [[1], [2], [-1], [1]]
    net.params["b1"][...] = [0.5]
    x = np.array([1.0, 2.0])
    # z = (1, 2, 0, 5) -> relu (1, 2, 0, 5) -> 1 + 4 - 0 + 5 + 0.5
    trace = tn.forward(net, x, "inference")
    assert trace.activations[1][0].tolist() == [1, 2, 0, 5]
    assert trace.output[0] == 10.5


def test_inference_is_repeatable():
    net = random_net((8, 8), batch_norm=True, dropout=0.5)
    x = np.random.default_rng(0).normal(size=(5, 2))
    a, b = tn.forward(net, x, "inference"), tn.forward(net, x, "inference")
    for u, v in zip(a.activations, b.activations):
        assert np.array_equal(u, v)


def test_trace_length_and_relu_nonnegative():
    net = random_net((4, 16, 8), batch_norm=True, dropout=0.25)
    x = np.random.default_rng(1).normal(size=(20, 2))
    for mode in ("inference", "training"):
        trace = tn.forward(net, x, mode, rng=np.random.default_rng(0))
        assert len(trace.activations) == net.depth + 2
        assert np.array_equal(trace.activations[0], x)
        for h in trace.activations[1:-1]:
            assert np.all(h >= 0)


def test_forward_rejects_non_finite_params():
    net = tn.init(NetHparams((4,)), 0)
    net.theta[0] = np.nan
    with pytest.raises(tn.DivergedError):
        tn.forward(net, np.zeros(2))


def test_separable_pair_is_learned():
    X = np.array([[0.5, 0.5], [-0.5, -0.5]])
    y = np.array([1, -1])
    net = tn.init(NetHparams((4,), "sgd", 0.1, 32), 0)
    out = tn.train(net, X, y, 500, train_seed=0)
    assert not out.diverged
    assert tn.accuracy(out.net, X, y) == 1.0


def test_train_preconditions():
    net = tn.init(NetHparams((4,)), 0)
    with pytest.raises(ValueError):
        tn.train(net, np.zeros((2, 2)), np.array([1, -1]), 0, 0)
    with pytest.raises(ValueError):
        tn.train(net, np.zeros((0, 2)), np.zeros(0), 10, 0)


@pytest.mark.parametrize("widths, bn", [((16,), True), ((8, 8, 8, 8), False)])
def test_huge_learning_rate_diverges(widths, bn):
    from gengap import spiral_gen as sg
    ds = sg.generate(sg.SpiralSpec(2, 0.05, 100, 1))
    net = tn.init(NetHparams(widths, "sgd", 1e6, 32, bn), 0)
    out = tn.train(net, ds.X, ds.y, 2000, 0)
    assert out.diverged
    assert out.steps_run == tn.DIVERGENCE_CHECK_EVERY


def test_adam_update_size_is_bounded_by_learning_rate():
    # Adam moves each parameter by about lr per step, so even lr=1e6 stays
    # far below float32 overflow over a short run
    from gengap import spiral_gen as sg
    ds = sg.generate(sg.SpiralSpec(2, 0.05, 100, 1))
    net = tn.init(NetHparams((16,), "adam", 1e6, 32), 0)
    out = tn.train(net, ds.X, ds.y, 1000, 0)
    assert not out.diverged
    assert np.max(np.abs(out.net.theta - net.theta)) <= 1e6 * 1000 * 1.01


def test_train_does_not_mutate_input_net():
    net = tn.init(NetHparams((4,)), 0)
    before = net.theta.copy()
    tn.train(net, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, -1]), 50, 0)
    assert np.array_equal(net.theta, before)


def test_train_is_deterministic():
    from gengap import spiral_gen as sg
    ds = sg.generate(sg.SpiralSpec(1, 0.05, 100, 2))
    hp = NetHparams((8, 8), "adam", 0.01, 32, True, 0.25)
    a = tn.train(tn.init(hp, 5), ds.X, ds.y, 300, 9)
    b = tn.train(tn.init(hp, 5), ds.X, ds.y, 300, 9)
    assert np.array_equal(a.net.theta, b.net.theta)
    assert all(np.array_equal(a.net.moving[k], b.net.moving[k]) for k in a.net.moving)


@pytest.mark.parametrize("widths, bn, dropout, opt", [
    ((4,), False, 0.0, "sgd"),
    ((16, 8), True, 0.0, "adam"),
    ((8, 4, 16), False, 0.5, "adam"),
    ((16, 16, 4, 8), True, 0.25, "sgd"),
])
def test_compiled_engine_matches_numpy_reference(widths, bn, dropout, opt):
    from gengap import spiral_gen as sg
    ds = sg.generate(sg.SpiralSpec(2, 0.05, 100, 1))
    net = tn.init(NetHparams(widths, opt, 0.01, 32, bn, dropout), 1)
    a = tn.train(net, ds.X, ds.y, 150, 3, engine="numpy")
    b = tn.train(net, ds.X, ds.y, 150, 3, engine="compiled")
    # Biases feeding batch norm have an exactly-zero true gradient; Adam turns
    # the rounding noise into lr-sized steps, which differs between engines.
    # They cancel inside batch norm and only leak into the moving means.
    for name, _ in a.net.layout:
        loose = bn and opt == "adam" and name.startswith("b") and name != f"b{len(widths)}"
        np.testing.assert_allclose(a.net.params[name], b.net.params[name],
                                   rtol=1e-6 if loose else 1e-8, atol=1e-6 if loose else 1e-12)
    for k in a.net.moving:
        np.testing.assert_allclose(a.net.moving[k], b.net.moving[k], rtol=1e-6, atol=1e-8)
    assert a.final_loss == pytest.approx(b.final_loss, rel=1e-8)
    np.testing.assert_allclose(tn.predict(a.net, ds.X), tn.predict(b.net, ds.X), atol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    theta = np.random.default_rng(0).normal(size=10)
    before = theta.copy()
    opt = tn.Optimizer("adam", 0.1, theta.size)
    for _ in range(5):
        opt.step(theta, np.zeros_like(theta))
    assert np.array_equal(theta, before)


def test_adagrad_first_step():
    theta, g = np.zeros(2), np.array([1.0, -2.0])
    tn.Optimizer("adagrad", 0.1, 2).step(theta, g)
    expected = -0.1 * g / (np.sqrt(0.1 + g * g) + 1e-7)
    np.testing.assert_allclose(theta, expected, rtol=1e-15)


# ------------------------------------------------------------ gradients

@pytest.mark.parametrize("widths, bn", list(itertools.product(
    [(4,), (8, 4), (4, 16, 8), (8, 8, 4, 4)], [False, True])))
def test_parameter_gradients_inference_mode(widths, bn):
    net = random_net(widths, bn, seed=len(widths))
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(6, 2)), rng.choice([-1.0, 1.0], size=6)
    analytic, numeric = param_grad_pair(net, X, y, "inference")
    assert max_rel_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("widths", [(8,), (8, 4), (16, 8, 4)])
def test_parameter_gradients_training_mode_frozen_masks(widths):
    net = random_net(widths, batch_norm=True, seed=3, dropout=0.25)
    rng = np.random.default_rng(11)
    X, y = rng.normal(size=(10, 2)), rng.choice([-1.0, 1.0], size=10)
    masks = [(rng.random((10, w)) >= 0.25) / 0.75 for w in widths]
    analytic, numeric = param_grad_pair(net, X, y, "training", masks)
    assert max_rel_error(analytic, numeric) < 1e-4


def test_grad_wrt_output_layer_is_one():
    net = random_net((4, 4))
    trace = tn.forward(net, np.ones((3, 2)))
    assert np.array_equal(tn.grad_wrt_activation(net, trace, net.depth + 1), np.ones((3, 1)))


def test_grad_wrt_last_hidden_is_output_kernel():
    net = random_net((8, 4), seed=2)
    trace = tn.forward(net, np.random.default_rng(0).normal(size=(4, 2)))
    g = tn.grad_wrt_activation(net, trace, net.depth)
    assert np.allclose(g, net.params[f"W{net.depth}"][:, 0])


def test_grad_wrt_input_all_active_is_linear_map():
    net = tn.init(NetHparams((3,)), 0)
    net.params["W0"][...] = [[1, 2, 0.5], [0.5, 1, 2]]
    net.params["b0"][...] = 5.0  # keeps every unit active for small inputs
    net.params["W1"][...] = [[1], [-1], [2]]
    trace = tn.forward(net, np.array([[0.1, 0.2]]))
    g = tn.grad_wrt_activation(net, trace, 0)
    assert np.allclose(g, (net.params["W0"] @ net.params["W1"]).T)


@pytest.mark.parametrize("bn", [False, True])
def test_activation_gradient_matches_finite_differences(bn):
    net = random_net((8, 8, 8), bn, seed=5)
    x = np.random.default_rng(3).normal(size=(1, 2))
    trace = tn.forward(net, x)
    for layer in range(net.depth + 2):
        analytic = tn.grad_wrt_activation(net, trace, layer)[0]
        numeric = activation_grad_fd(net, layer, trace.activations[layer][0])
        assert max_rel_error(analytic, numeric) < 1e-4


def test_grad_layer_out_of_range():
    net = random_net((4,))
    trace = tn.forward(net, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        tn.grad_wrt_activation(net, trace, 3)


def test_batch_norm_inference_independent_of_batch():
    from gengap import spiral_gen as sg
    ds = sg.generate(sg.SpiralSpec(1, 0.0, 100, 1))
    out = tn.train(tn.init(NetHparams((8, 8), batch_norm=True), 0), ds.X, ds.y, 200, 0)
    alone = tn.predict(out.net, ds.X[:1])
    together = tn.predict(out.net, ds.X)[:1]
    assert np.allclose(alone, together, rtol=0, atol=1e-14)


# ------------------------------------------------------------ accuracy

def test_accuracy_cases():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]])
    net = tn.init(NetHparams((1,)), 0)
    net.params["W0"][...] = [[1.0], [0.0]]
    net.params["b0"][...] = [0.0]
    net.params["W1"][...] = [[1.0]]
    net.params["b1"][...] = [-0.5]
    # f = relu(x) - 0.5 -> signs +, +, -, -
    assert tn.accuracy(net, X, np.array([1, 1, -1, -1])) == 1.0
    assert tn.accuracy(net, X, np.array([1, 1, -1, 1])) == 0.75
    net.theta[...] = 0.0
    assert tn.accuracy(net, X, np.array([1, 1, -1, -1])) == 0.0
    with pytest.raises(ValueError):
        tn.accuracy(net, np.zeros((0, 2)), np.zeros(0))


def test_checkpoint_round_trip(tmp_path):
    net = random_net((4, 8), batch_norm=True)
    net.save(tmp_path / "n.json")
    back = tn.Network.load(tmp_path / "n.json")
    assert np.array_equal(back.theta, net.theta)
    assert back.hparams == net.hparams
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.array_equal(tn.predict(back, x), tn.predict(net, x))


@settings(max_examples=20, deadline=None)
@given(depth=st.integers(1, 4), bn=st.booleans(), seed=st.integers(0, 1000))
def test_hidden_activations_nonnegative_property(depth, bn, seed):
    net = random_net([8] * depth, bn, seed=seed)
    x = np.random.default_rng(seed).normal(size=(5, 2)) * 3
    for h in tn.forward(net, x).activations[1:-1]:
        assert np.all(h >= 0)
