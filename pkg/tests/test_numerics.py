import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talkinghead.numerics import (
    MlpParams,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    TrainingDivergence,
    check_finite_loss,
    conv1d_backward,
    conv1d_forward,
    cosine_backward,
    cosine_forward,
    grad_check,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    sigmoid,
    softplus,
)

from oracles import central_difference


def _net(weights, biases, acts):
    return MlpParams([np.asarray(w, float) for w in weights], [np.asarray(b, float) for b in biases], acts)


def test_identity_relu_layer_clamps_negative():
    p = _net([np.eye(2)], [np.zeros(2)], ["relu"])
    np.testing.assert_array_equal(mlp_forward(p, np.array([1.0, -2.0])), [1.0, 0.0])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_zero_weights_give_bias(xs):
    b = np.array([0.5, -1.5])
    p = _net([np.zeros((3, 2))], [b], ["identity"])
    np.testing.assert_array_equal(mlp_forward(p, np.array(xs)), b)


def test_two_layer_hand_value():
    # h = relu([1,1] @ [[1,-2],[0.5,1]] + [0,0.5]) = relu([1.5,-0.5]) = [1.5, 0]
    # y = [1.5, 0] @ [[2,0],[1,-1]] + [0.1,0.2] = [3.1, 0.2]
    p = _net([[[1, -2], [0.5, 1]], [[2, 0], [1, -1]]], [[0, 0.5], [0.1, 0.2]], ["relu", "identity"])
    np.testing.assert_allclose(mlp_forward(p, np.array([1.0, 1.0])), [3.1, 0.2], atol=1e-12)


def test_forward_rejects_wrong_width():
    p = _net([np.eye(2)], [np.zeros(2)], ["relu"])
    with pytest.raises(ShapeError):
        mlp_forward(p, np.ones(3))


def test_layer_chain_validated():
    with pytest.raises(ShapeError):
        _net([np.ones((2, 3)), np.ones((2, 2))], [np.zeros(3), np.zeros(2)], ["relu", "identity"])


def test_forward_is_bit_deterministic(rng):
    p = MlpParams.init([5, 7, 3], ["relu", "sigmoid"], rng)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    assert mlp_forward(p, x).tobytes() == mlp_forward(p, x).tobytes()


def test_linear_layer_at_minimum_has_zero_gradient():
    w = np.array([[2.0, -1.0], [0.5, 3.0]])
    p = _net([w], [np.array([0.1, 0.2])], ["identity"])
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = mlp_forward(p, x)
    g, gx = mlp_backward(p, x, 2 * (y - y))  # target == output
    assert all(np.all(t == 0) for t in g.weights + g.biases)
    assert np.all(gx == 0)


def test_squared_norm_gradient_is_two_w():
    # f(w) = |x @ W|^2 with x = e_1 picks out row 0: gradient on that row is 2w
    w = np.array([[1.5, -2.0, 0.25], [0.0, 0.0, 0.0]])
    p = _net([w], [np.zeros(3)], ["identity"])
    x = np.array([1.0, 0.0])
    y = mlp_forward(p, x)
    g, _ = mlp_backward(p, x, 2 * y)
    np.testing.assert_allclose(g.weights[0][0], 2 * w[0])


def test_backward_shapes_mirror_params(rng):
    p = MlpParams.init([4, 6, 2], ["relu", "identity"], rng, np.float64)
    x = rng.standard_normal((3, 4))
    g, gx = mlp_backward(p, x, np.ones((3, 2)))
    assert [a.shape for a in g.weights] == [a.shape for a in p.weights]
    assert [a.shape for a in g.biases] == [a.shape for a in p.biases]
    assert gx.shape == x.shape
    with pytest.raises(ShapeError):
        mlp_backward(p, x, np.ones((3, 3)))


@pytest.mark.parametrize("acts", [["tanh", "identity"], ["sigmoid", "softplus"], ["relu", "sigmoid"]])
def test_mlp_backward_matches_finite_differences(rng, acts):
    p = MlpParams.init([3, 5, 2], acts, rng, np.float64)
    x = rng.standard_normal((4, 3))
    up = rng.standard_normal((4, 2))

    def loss(params):
        return float((mlp_forward(params, x) * up).sum())

    g, gx = mlp_backward(p, x, up)
    for i in range(2):
        num = central_difference(lambda w: loss(p), p.weights[i])
        if "relu" in acts:
            np.testing.assert_allclose(g.weights[i], num, rtol=1e-5, atol=1e-7)
        else:
            rel = np.abs(g.weights[i] - num) / np.maximum(np.abs(num), 1e-6)
            assert rel.max() < 1e-6
    num_x = central_difference(lambda xx: float((mlp_forward(p, xx) * up).sum()), x.copy())
    np.testing.assert_allclose(gx, num_x, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv1d_backward_matches_finite_differences(rng, dilation):
    x = rng.standard_normal((2, 9, 3))
    w = rng.standard_normal((3, 3, 4))
    b = rng.standard_normal(4)
    gy = rng.standard_normal((2, 9, 4))
    gx, gw, gb = conv1d_backward(x, w, dilation, gy)
    f = lambda: float((conv1d_forward(x, w, b, dilation) * gy).sum())
    np.testing.assert_allclose(gw, central_difference(lambda _: f(), w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gx, central_difference(lambda _: f(), x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, central_difference(lambda _: f(), b), rtol=1e-6, atol=1e-8)


def test_conv1d_same_padding_keeps_length(rng):
    x = rng.standard_normal((1, 5, 2))
    y = conv1d_forward(x, rng.standard_normal((3, 2, 6)), np.zeros(6), 4)
    assert y.shape == (1, 5, 6)
    with pytest.raises(ShapeError):
        conv1d_forward(x, np.ones((2, 2, 6)), np.zeros(6), 1)


def test_cosine_backward_matches_finite_differences(rng):
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    gc = rng.standard_normal(3)
    ga, gb = cosine_backward(a, b, gc)
    np.testing.assert_allclose(ga, central_difference(lambda _: float((cosine_forward(a, b) * gc).sum()), a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central_difference(lambda _: float((cosine_forward(a, b) * gc).sum()), b), rtol=1e-6, atol=1e-9)


def test_sigmoid_and_softplus_are_stable_at_extremes():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5
    sp = softplus(z)
    assert np.all(np.isfinite(sp)) and sp[-1] == 1000.0
    assert math.isclose(sp[2], math.log(2.0))


# --- optimizer -------------------------------------------------------------


def test_sgd_step_arithmetic():
    p = {"w": np.array([1.0])}
    optimizer_step(OptimizerState("sgd", lr=0.1), p, {"w": np.array([2.0])})
    np.testing.assert_allclose(p["w"], [0.8])


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = {"w": np.array([1.0, -3.0])}
    optimizer_step(OptimizerState(kind, lr=0.1), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -3.0])


def test_adam_first_step_closed_form():
    # bias-corrected first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    p = {"w": np.array([0.0])}
    st_ = OptimizerState("adam", lr=0.01)
    optimizer_step(st_, p, {"w": np.array([3.0])})
    np.testing.assert_allclose(p["w"], [-0.01 * 3.0 / (3.0 + 1e-8)], rtol=0, atol=1e-15)
    assert st_.step == 1
    optimizer_step(st_, p, {"w": np.array([3.0])})
    assert st_.step == 2
    assert st_.m["w"].shape == p["w"].shape


def test_optimizer_rejects_non_finite_and_mismatched_gradients():
    p = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteError):
        optimizer_step(OptimizerState(), p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ShapeError):
        optimizer_step(OptimizerState(), p, {"w": np.zeros(3)})


def test_sgd_converges_monotonically_on_quadratic():
    # f(w) = 0.5 * w^T A w with curvatures 1 and 4, so lr < 2/4 guarantees descent
    a = np.diag([1.0, 4.0])
    p = {"w": np.array([3.0, -2.0])}
    state = OptimizerState("sgd", lr=0.45)
    prev = float(0.5 * p["w"] @ a @ p["w"])
    for _ in range(50):
        optimizer_step(state, p, {"w": a @ p["w"]})
        cur = float(0.5 * p["w"] @ a @ p["w"])
        assert cur < prev
        prev = cur


def test_check_finite_loss_raises_divergence():
    with pytest.raises(TrainingDivergence) as info:
        check_finite_loss("train-x", 17, float("nan"))
    assert info.value.stage == "train-x" and info.value.step == 17


# --- grad_check ------------------------------------------------------------


def _quadratic_loss(params):
    w = params["w"]
    return float(0.5 * (w ** 2).sum() + w.sum()), {"w": w + 1.0}


def test_grad_check_quadratic_passes_tight():
    params = {"w": np.array([0.3, -1.2, 2.0])}
    rep = grad_check(params, _quadratic_loss, tolerance=1e-8)
    assert rep.passed and rep.checked == 3


def test_grad_check_flags_corrupted_gradient():
    def bad(params):
        loss, g = _quadratic_loss(params)
        return loss, {"w": g["w"] * 1.01}

    rep = grad_check({"w": np.array([0.3, -1.2, 2.0])}, bad, tolerance=1e-4)
    assert not rep.passed and len(rep.flagged) == 3


def test_grad_check_requires_float64_and_finite_loss():
    with pytest.raises(TypeError):
        grad_check({"w": np.zeros(2, np.float32)}, _quadratic_loss)
    with pytest.raises(NonFiniteError):
        grad_check({"w": np.zeros(2)}, lambda p: (float("inf"), {"w": np.zeros(2)}))


def test_grad_check_skips_relu_kink():
    # pre-activation exactly at 0: the one-sided slopes differ, so the coordinate is skipped
    p = MlpParams([np.array([[1.0]])], [np.array([0.0])], ["relu"])
    params = {"w": p.weights[0], "b": p.biases[0]}
    x = np.array([[1.0]])

    def loss(_):
        y, cache = mlp_forward(p, x, return_cache=True)
        g, _ = mlp_backward(p, x, np.ones_like(y), cache)
        return float(y.sum()), {"w": g.weights[0], "b": g.biases[0]}

    p.weights[0][0, 0] = 0.0
    rep = grad_check(params, loss)
    assert rep.skipped_kinks >= 1 and rep.passed


def test_grad_check_random_mlp(rng):
    p = MlpParams.init([4, 8, 3], ["relu", "identity"], rng, np.float64)
    x = rng.standard_normal((6, 4))
    t = rng.standard_normal((6, 3))
    params = p.named("m")

    def loss(_):
        y, cache = mlp_forward(p, x, return_cache=True)
        g, _ = mlp_backward(p, x, 2 * (y - t) / y.size, cache)
        return float(((y - t) ** 2).mean()), g.named("m")

    rep = grad_check(params, loss, tolerance=1e-6)
    assert rep.passed, rep.flagged
