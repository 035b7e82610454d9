import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptlab import nn
from adaptlab.errors import ShapeError


def linear(W, b=None):
    W = np.asarray(W, dtype=float)
    return nn.MLP([(W, np.zeros(W.shape[0]) if b is None else np.asarray(b, float))], "identity")


# --- forward ---------------------------------------------------------------

def test_identity_layer_passes_input_through():
    x = np.array([[1.0, -2.0, 3.0]])
    pen, logits = nn.forward(linear(np.eye(3)), x)
    assert np.array_equal(logits, x) and np.array_equal(pen, x)


def test_relu_on_negative_preactivations():
    model = nn.MLP([(np.eye(2), np.full(2, -10.0)), (np.eye(2), np.zeros(2))], "relu")
    pen, _ = nn.forward(model, np.ones((3, 2)))
    assert np.all(pen == 0)


def test_forward_matches_hand_arithmetic():
    rng = np.random.default_rng(0)
    W1, b1 = rng.standard_normal((4, 3)), rng.standard_normal(4)
    W2, b2 = rng.standard_normal((2, 4)), rng.standard_normal(2)
    x = rng.standard_normal((2, 3))
    model = nn.MLP([(W1, b1), (W2, b2)], "tanh")
    hidden = np.tanh(np.einsum("ij,kj->ik", x, W1) + b1)
    expected = np.einsum("ij,kj->ik", hidden, W2) + b2
    pen, logits = nn.forward(model, x)
    np.testing.assert_allclose(pen, hidden, rtol=1e-12)
    np.testing.assert_allclose(logits, expected, rtol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.forward(linear(np.eye(3)), np.ones((2, 4)))


def test_layer_chain_validated():
    with pytest.raises(ShapeError):
        nn.MLP([(np.ones((3, 2)), np.zeros(3)), (np.ones((2, 4)), np.zeros(2))], "relu")


# --- softmax and losses -----------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nn.softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    p = nn.softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariance_and_rows(row, c):
    x = np.array([row])
    p = nn.softmax(x)
    assert abs(p.sum() - 1) < 1e-6 and np.all(p > 0)
    np.testing.assert_allclose(nn.softmax(x + c), p, rtol=1e-9, atol=1e-15)


def test_cross_entropy_examples():
    assert nn.cross_entropy(np.eye(3), [0, 1, 2]) == pytest.approx(0.0)
    assert nn.cross_entropy(np.full((5, 4), 0.25), [0, 1, 2, 3, 0]) == pytest.approx(math.log(4))
    p = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert nn.cross_entropy(p, [0, 0]) == pytest.approx((math.log(2) + math.log(4)) / 2)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        nn.cross_entropy(np.full((1, 2), 0.5), [2])


def test_soft_cross_entropy_examples():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert nn.soft_cross_entropy(p, np.eye(2)[[1, 0]]) == nn.cross_entropy(p, [1, 0])
    assert nn.soft_cross_entropy(np.full((1, 2), 0.5), np.full((1, 2), 0.5)) == pytest.approx(math.log(2))
    assert nn.soft_cross_entropy(np.full((1, 2), 0.5), np.array([[0.3, 0.7]])) == pytest.approx(math.log(2))


def test_soft_cross_entropy_target_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        nn.soft_cross_entropy(np.full((1, 2), 0.5), np.array([[0.3, 0.6]]))


def test_kl_examples():
    p = np.array([0.1, 0.2, 0.7])
    assert nn.kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)
    assert nn.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert nn.kl_divergence([0.9, 0.1], [0.5, 0.5]) == pytest.approx(expected)
    assert expected == pytest.approx(0.3681, abs=5e-5)


def test_kl_length_mismatch():
    with pytest.raises(ShapeError):
        nn.kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_losses_nonnegative(seed, C):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(C), 4), rng.dirichlet(np.ones(C), 4)
    assert nn.cross_entropy(p, rng.integers(0, C, 4)) >= 0
    assert nn.soft_cross_entropy(p, q) >= 0
    assert nn.kl_divergence(q[0], p[0]) >= -1e-15


# --- gradients ----------------------------------------------------------------------

def test_closed_form_softmax_regression_gradient():
    rng = np.random.default_rng(2)
    W, b = rng.standard_normal((3, 5)), rng.standard_normal(3)
    x, y = rng.standard_normal((7, 5)), rng.integers(0, 3, 7)
    grads, _ = nn.backward(linear(W, b), x, "cross_entropy", y)
    p = np.exp(x @ W.T + b)
    p /= p.sum(1, keepdims=True)
    delta = p - np.eye(3)[y]
    np.testing.assert_allclose(grads.layers[0][0], delta.T @ x / 7, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(grads.layers[0][1], delta.sum(0) / 7, rtol=1e-12, atol=1e-15)


def test_zero_signal_under_kl():
    rng = np.random.default_rng(3)
    model = nn.init_params([4, 5, 3], "tanh", seed=1)
    x = rng.standard_normal((6, 4))
    ref = nn.softmax(nn.forward(model, x)[1])
    grads, loss = nn.backward(model, x, "kl_to_reference", ref)
    assert np.abs(grads.flat()).max() < 1e-10
    assert abs(loss) < 1e-10


@pytest.mark.parametrize("loss", nn.LOSS_KINDS)
@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_gradient_check_h5_c3_n4(loss, act):
    rng = np.random.default_rng(11)
    for trial in range(5):
        model = nn.init_params([4, 5, 3], act, seed=[trial, 1])
        x = rng.standard_normal((4, 4))
        targets = rng.integers(0, 3, 4) if loss == "cross_entropy" else rng.dirichlet(np.ones(3), 4)
        assert nn.gradient_check(model, x, loss, targets, step=1e-4) < 1e-4


@given(seed=st.integers(0, 10_000), n=st.integers(1, 8), h=st.integers(1, 6), C=st.integers(2, 6),
       loss=st.sampled_from(nn.LOSS_KINDS), act=st.sampled_from(["tanh", "identity"]))
def test_gradient_check_property(seed, n, h, C, loss, act):
    # smooth activations only: a relu kink inside the difference step is a property of the oracle, not the code
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 7))
    model = nn.init_params([d, h, C], act, seed=seed)
    x = rng.standard_normal((n, d))
    targets = rng.integers(0, C, n) if loss == "cross_entropy" else rng.dirichlet(np.ones(C), n)
    assert nn.gradient_check(model, x, loss, targets, step=1e-5) < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    model = nn.init_params([3, 4, 2], "tanh", seed=2)
    x, y = rng.standard_normal((2, 3)), np.array([0, 1])
    _, _, gx = nn.backward(model, x, "cross_entropy", y, return_input_grad=True)
    numeric = nn.numeric_gradient(lambda: nn.loss_value(model, x, "cross_entropy", y), [x], 1e-6)[0]
    np.testing.assert_allclose(gx, numeric, rtol=1e-6, atol=1e-9)


# --- optimizer and init -------------------------------------------------------------

def test_sgd_plain_step_to_zero():
    model = linear(np.array([[2.0, -1.0]]), [0.5])
    grads = nn.Gradients([(model.layers[0][0].copy(), model.layers[0][1].copy())])
    nn.sgd_step(model, grads, nn.zero_state(model), nn.OptimConfig(1.0, momentum=0.0))
    assert np.all(model.flat() == 0)


def test_sgd_zero_gradient_is_noop():
    model = linear(np.array([[2.0, -1.0]]), [0.5])
    before = model.flat().copy()
    grads = nn.Gradients([(np.zeros((1, 2)), np.zeros(1))])
    nn.sgd_step(model, grads, nn.zero_state(model), nn.OptimConfig(0.3))
    assert np.array_equal(model.flat(), before)


def test_two_momentum_steps():
    # v1 = 1, theta1 = -0.1; v2 = 1.9, theta2 = -0.29
    model = linear(np.zeros((1, 1)))
    state = nn.zero_state(model)
    g = nn.Gradients([(np.ones((1, 1)), np.zeros(1))])
    for _ in range(2):
        nn.sgd_step(model, g, state, nn.OptimConfig(0.1, momentum=0.9))
    assert model.layers[0][0][0, 0] == pytest.approx(-0.29, abs=1e-15)


def test_init_params_contracts():
    a = nn.init_params([5, 4, 3], seed=7)
    assert a.equals(nn.init_params([5, 4, 3], seed=7))
    assert np.all(nn.init_params([5, 4, 3], scheme="zeros").flat() == 0)
    for (W, b), fan_in in zip(a.layers, [5, 4]):
        bound = 1 / math.sqrt(fan_in)
        assert np.abs(W).max() <= bound and np.abs(b).max() <= bound
    with pytest.raises(ValueError):
        nn.init_params([5, 0, 3])


# --- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = nn.round_to_f32(nn.init_params([6, 4, 3], "tanh", seed=3))
    nn.save_model(model, tmp_path / "m.amdl")
    back = nn.load_model(tmp_path / "m.amdl")
    assert back.activation == "tanh" and back.equals(model)
    raw = (tmp_path / "m.amdl").read_bytes()
    assert raw[:4] == b"AMDL"
    assert len(raw) == 12 + (8 + 4 * (24 + 4)) + (8 + 4 * (12 + 3)) + 4


def test_image_scale_learning_rates_recorded():
    assert nn.IMAGE_LP_LR == 30.0 and nn.IMAGE_FT_LR == 1e-5
