import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvae import nn
from cvae.nn import (
    AdamState,
    DenseLayer,
    DimensionError,
    GaussianParams,
    NonFiniteError,
    Tape,
    adam_step,
    dense_forward,
    gradient_check,
    kl_to_standard_normal,
    relu,
    reparameterize,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def layer(w, b, use_bias=True):
    return DenseLayer(np.array(w, dtype=float), np.array(b, dtype=float), use_bias)


# dense_forward

def test_dense_identity():
    out = dense_forward(np.array([[1.0, 2.0]]), layer([[1, 0], [0, 1]], [0, 0]))
    assert out.tolist() == [[1.0, 2.0]]


def test_dense_zero_input_without_bias():
    lay = layer([[3.0, -2.0], [0.5, 9.0]], [0, 0], use_bias=False)
    assert dense_forward(np.zeros((1, 2)), lay).tolist() == [[0.0, 0.0]]


def test_dense_hand_multiply():
    out = dense_forward(np.array([[1.0, 1.0]]), layer([[2, 3], [4, 5]], [1, -1]))
    assert out.tolist() == [[7.0, 7.0]]


def test_dense_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)|\(2, 2\).*\(1, 3\)"):
        dense_forward(np.ones((1, 3)), layer([[1, 0], [0, 1]], [0, 0]))


def test_bias_free_layer_keeps_zero_bias():
    lay = DenseLayer.he_init(4, 3, np.random.default_rng(0), use_bias=False)
    assert not lay.bias.any() and not lay.use_bias


def test_he_init_scale():
    lay = DenseLayer.he_init(400, 300, np.random.default_rng(0))
    assert abs(lay.weights.std() - math.sqrt(2 / 400)) < 0.003
    assert not lay.bias.any()


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_zero_bias_relu_stack_maps_zero_to_zero(depth, width, seed):
    r = np.random.default_rng(seed)
    x = np.zeros((3, width))
    for _ in range(depth):
        x = relu(dense_forward(x, DenseLayer.he_init(x.shape[1], width, r, use_bias=False)))
    assert np.array_equal(x, np.zeros_like(x)) and not np.signbit(x).any()


# relu

@pytest.mark.parametrize(
    "x, expected",
    [([-1.0, 0.0, 2.0], [0.0, 0.0, 2.0]), ([0.0, 0.0], [0.0, 0.0]), ([3.5, -0.001], [3.5, 0.0])],
)
def test_relu_examples(x, expected):
    assert relu(np.array(x)).tolist() == expected


def test_sigmoid_is_stable_at_extremes():
    out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out.tolist() == [0.0, 0.5, 1.0]
    assert np.all(np.isfinite(nn.softplus(np.array([-800.0, 800.0]))))


# reparameterize

@pytest.mark.parametrize(
    "mu, log_var, eps, expected",
    [(1.0, 0.0, 0.5, 1.5), (0.0, 0.0, 0.0, 0.0), (2.0, 2 * math.log(2), 1.0, 4.0)],
)
def test_reparameterize_examples(mu, log_var, eps, expected):
    out = reparameterize(GaussianParams(np.array([[mu]]), np.array([[log_var]])), np.array([[eps]]))
    assert out[0, 0] == pytest.approx(expected, abs=1e-15)


def test_reparameterize_shape_mismatch():
    with pytest.raises(DimensionError):
        reparameterize(GaussianParams(np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((2, 3)))


@given(arrays(float, (3, 2), elements=finite), arrays(float, (3, 2), elements=finite))
def test_reparameterize_zero_eps_returns_mu(mu, log_var):
    assert np.array_equal(reparameterize(GaussianParams(mu, log_var), np.zeros((3, 2))), mu)


def test_log_var_clamped_at_construction():
    p = GaussianParams(np.zeros((1, 3)), np.array([[-50.0, 0.0, 50.0]]))
    assert p.log_var.tolist() == [[-10.0, 0.0, 10.0]]


def test_gaussian_params_shapes_must_match():
    with pytest.raises(DimensionError):
        GaussianParams(np.zeros((2, 2)), np.zeros((2, 1)))


# KL

def kl(mu, log_var):
    return kl_to_standard_normal(GaussianParams(np.atleast_2d(mu), np.atleast_2d(log_var)))


def test_kl_zero_at_prior():
    assert kl(np.zeros(5), np.zeros(5)).tolist() == [0.0]


def test_kl_hand_values():
    assert kl([1.0], [0.0])[0] == pytest.approx(0.5, abs=1e-15)
    assert kl([0.0], [1.0])[0] == pytest.approx((math.e - 2) / 2, abs=1e-15)
    assert (math.e - 2) / 2 == pytest.approx(0.3591, abs=1e-4)


def monte_carlo_kl(mu, log_var, n, rng):
    """E_q[log q - log p] for a 1-D Gaussian q, estimated from n samples."""
    sigma = math.exp(0.5 * log_var)
    s = mu + sigma * rng.standard_normal(n)
    log_q = -0.5 * ((s - mu) / sigma) ** 2 - math.log(sigma)
    log_p = -0.5 * s**2
    return float(np.mean(log_q - log_p))


@pytest.mark.parametrize("mu, log_var, expected", [(1.0, 0.0, 0.5), (0.0, 1.0, (math.e - 2) / 2)])
def test_kl_hand_values_match_monte_carlo(mu, log_var, expected):
    assert monte_carlo_kl(mu, log_var, 10**6, np.random.default_rng(7)) == pytest.approx(expected, abs=1e-2)


@given(arrays(float, (4, 3), elements=finite), arrays(float, (4, 3), elements=finite))
def test_kl_nonnegative(mu, log_var):
    assert np.all(kl(mu, log_var) >= 0)


@given(arrays(float, (1, 3), elements=finite), arrays(float, (1, 3), elements=finite))
def test_kl_zero_only_at_prior(mu, log_var):
    at_prior = not mu.any() and not log_var.any()
    value = kl(mu, log_var)[0]
    assert (value == 0.0) == at_prior or (not at_prior and value < 1e-12)


# Adam

def test_adam_zero_grad_leaves_param_and_moments():
    p = np.array([1.0, -2.0])
    state = AdamState.for_param(p)
    adam_step(p, np.zeros(2), state)
    assert p.tolist() == [1.0, -2.0]
    assert not state.first_moment.any() and not state.second_moment.any()
    assert state.step_count == 1


def test_adam_first_step_hand_value():
    p = np.zeros(1)
    adam_step(p, np.array([0.1]), AdamState.for_param(p, learning_rate=1e-3))
    assert p[0] == pytest.approx(-1e-3 * 0.1 / (0.1 + 1e-8), abs=1e-15)
    # the rounded figure -9.99e-4 is within 1e-6 of the exact -9.9999990e-4
    assert p[0] == pytest.approx(-9.99e-4, abs=1e-6)


def scalar_adam(p, g, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


@pytest.mark.parametrize("steps", [2, 10])
def test_adam_matches_scalar_recurrence(steps):
    p = np.array([0.3])
    state = AdamState.for_param(p)
    for _ in range(steps):
        adam_step(p, np.array([1.0]), state)
    assert abs(p[0] - scalar_adam(0.3, 1.0, steps)) < 1e-12


def test_adam_step_count_increments_and_is_deterministic():
    a, b = np.ones(3), np.ones(3)
    sa, sb = AdamState.for_param(a), AdamState.for_param(b)
    for k in range(1, 4):
        adam_step(a, np.array([0.1, -0.2, 0.3]), sa)
        adam_step(b, np.array([0.1, -0.2, 0.3]), sb)
        assert sa.step_count == k
    assert np.array_equal(a, b)


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(DimensionError):
        adam_step(p, np.zeros(2), AdamState.for_param(p))


# gradient_check

def test_gradient_check_quadratic():
    def loss(params):
        p = params["p"]
        return float(np.sum(p**2)), {"p": 2 * p}

    assert gradient_check(loss, {"p": np.array([1.0, 2.0])}, h=1e-5) < 1e-8


def test_gradient_check_constant_loss():
    assert gradient_check(lambda params: (3.0, {"p": np.zeros(2)}), {"p": np.array([1.0, 2.0])}) == 0.0


def test_gradient_check_detects_wrong_gradient():
    def loss(params):
        p = params["p"]
        return float(np.sum(p**2)), {"p": 3 * p}

    assert gradient_check(loss, {"p": np.array([1.0, 2.0])}) > 0.1


def test_gradient_check_rejects_nonfinite_loss():
    with pytest.raises(NonFiniteError):
        gradient_check(lambda params: (float("nan"), {"p": np.zeros(1)}), {"p": np.zeros(1)})


def test_gradient_check_rejects_bad_step():
    with pytest.raises(ValueError):
        gradient_check(lambda params: (0.0, {"p": np.zeros(1)}), {"p": np.zeros(1)}, h=0.0)


# tape ops, each checked against central differences

def _tape_check(build, shapes, seed=0):
    r = np.random.default_rng(seed)
    params = {k: r.normal(size=s) for k, s in shapes.items()}

    def loss(p):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in p.items()}
        out = build(tape, leaves)
        tape.backward(out)
        return float(out.value), {k: n.grad for k, n in leaves.items()}

    return gradient_check(loss, params, probe_count=100)


def test_tape_dense_relu_mean():
    def build(t, n):
        h = t.relu(t.dense(n["x"], n["w"], n["b"]))
        return t.mean(t.bernoulli_nll(h, np.full((3, 2), 0.3)))

    assert _tape_check(build, {"x": (3, 4), "w": (4, 2), "b": (2,)}) < 1e-6


def test_tape_reparameterize_kl_clip():
    eps = np.random.default_rng(5).normal(size=(3, 2))

    def build(t, n):
        lv = t.clip(n["lv"], -10, 10)
        z = t.reparameterize(n["mu"], lv, eps)
        return t.weighted_sum([(1.0, t.mean(t.kl(n["mu"], lv))), (0.5, t.mean(t.gaussian_nll(z, np.ones((3, 2)))))])

    assert _tape_check(build, {"mu": (3, 2), "lv": (3, 2)}) < 1e-6


def test_tape_concat_log_odds_bce():
    def build(t, n):
        v = t.concat(n["a"], n["b"])
        logits = t.dense(v, n["w"], None)
        return t.weighted_sum(
            [(1.0, t.mean(t.clamped_log_odds(logits))), (2.0, t.mean(t.binary_cross_entropy(logits, np.array([1.0, 0.0, 1.0]))))]
        )

    assert _tape_check(build, {"a": (3, 2), "b": (3, 1), "w": (3, 1)}) < 1e-6


def test_tape_sigmoid():
    def build(t, n):
        return t.mean(t.gaussian_nll(t.sigmoid(n["x"]), np.zeros((2, 3))))

    assert _tape_check(build, {"x": (2, 3)}) < 1e-6


def test_tape_constant_gets_no_grad():
    tape = Tape()
    c = tape.constant(np.ones((2, 2)))
    w = tape.leaf(np.ones((2, 1)))
    out = tape.mean(tape.gaussian_nll(tape.dense(c, w, None), np.zeros((2, 1))))
    tape.backward(out)
    assert c.grad is None and w.grad is not None
