import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.errors import ConfigurationError, FormatError, InputError
from fedmem.nn import (
    LayerSpec,
    Model,
    forward,
    forward_batch,
    init_model,
    load_model,
    loss_and_grad,
    mlp_spec,
    predict_proba,
    save_model,
    sgd_step,
    softmax,
)
from fedmem.samples import Samples


def naive_forward(model, x):
    """Loop-based forward pass; independent of the vectorized path."""
    a = [float(v) for v in x]
    outputs = []
    offset = 0
    for layer in model.layers:
        W = model.params[offset : offset + layer.input_dim * layer.output_dim]
        offset += layer.input_dim * layer.output_dim
        b = model.params[offset : offset + layer.output_dim]
        offset += layer.output_dim
        z = []
        for j in range(layer.output_dim):
            s = b[j]
            for i in range(layer.input_dim):
                s += a[i] * W[i * layer.output_dim + j]
            z.append(s)
        a = [max(v, 0.0) for v in z] if layer.activation == "relu" else z
        outputs.append(a)
    return np.array(outputs[-1]), np.array(outputs[model.repr_index])


def finite_diff(model, batch, h=1e-5):
    g = np.zeros_like(model.params)
    for i in range(model.params.shape[0]):
        plus = model.params.copy()
        minus = model.params.copy()
        plus[i] += h
        minus[i] -= h
        g[i] = (loss_and_grad(model.with_params(plus), batch)[0] - loss_and_grad(model.with_params(minus), batch)[0]) / (2 * h)
    return g


def random_model(rng, max_params=200):
    while True:
        dims = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        dims[-1] = max(dims[-1], 2)
        spec = mlp_spec(dims)
        if sum(s.n_params for s in spec) <= max_params:
            break
    model = init_model(spec, seed=int(rng.integers(1 << 30)))
    # random biases too, so relu kinks are not all at the origin
    return model.with_params(model.params + 0.1 * rng.normal(size=model.params.shape))


def test_init_is_deterministic():
    spec = [LayerSpec(2, 3, "relu"), LayerSpec(3, 2, "identity")]
    a = init_model(spec, seed=7)
    b = init_model(spec, seed=7)
    assert a.params.tobytes() == b.params.tobytes()
    assert a.params.shape == (3 * 3 + 4 * 2,)
    assert not np.array_equal(a.params, init_model(spec, seed=8).params)


def test_init_scale_and_zero_bias():
    spec = [LayerSpec(16, 8, "relu"), LayerSpec(8, 3, "identity")]
    m = init_model(spec, seed=1)
    (W1, b1), (W2, b2) = m.weights()
    assert np.all(np.abs(W1) <= 1 / 4) and np.all(np.abs(W2) <= 1 / math.sqrt(8))
    assert not b1.any() and not b2.any()


def test_repr_index_out_of_range():
    spec = [LayerSpec(2, 3, "relu"), LayerSpec(3, 2, "identity")]
    with pytest.raises(ConfigurationError):
        init_model(spec, repr_index=2)


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        init_model([LayerSpec(2, 3, "relu"), LayerSpec(4, 2, "identity")])
    with pytest.raises(ConfigurationError):
        init_model([LayerSpec(2, 3, "relu")])  # final layer must be identity
    with pytest.raises(ConfigurationError):
        LayerSpec(0, 3)


def test_zero_weights_give_uniform_softmax():
    m = Model((LayerSpec(4, 4, "identity"),), np.zeros(20), 0)
    logits, _ = forward(m, [1.0, -2.0, 3.0, 0.5])
    assert not logits.any()
    np.testing.assert_array_equal(predict_proba(m, [1.0, -2.0, 3.0, 0.5]), np.full(4, 0.25))


def test_identity_network():
    spec = (LayerSpec(2, 2, "identity"), LayerSpec(2, 2, "identity"))
    eye = np.eye(2).ravel()
    m = Model(spec, np.concatenate([eye, [0, 0], eye, [0, 0]]), 0)
    logits, rep = forward(m, [1.0, 2.0])
    np.testing.assert_array_equal(logits, [1.0, 2.0])
    np.testing.assert_array_equal(rep, [1.0, 2.0])


def test_relu_clips_negative_preactivation():
    spec = (LayerSpec(1, 2, "relu"), LayerSpec(2, 2, "identity"))
    params = np.concatenate([[1.0, -1.0], [0.0, 0.0], np.eye(2).ravel(), [0.0, 0.0]])
    _, rep = forward(Model(spec, params, 0), [3.0])
    np.testing.assert_array_equal(rep, [3.0, 0.0])


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = random_model(rng)
        m = Model(m.layers, m.params, int(rng.integers(len(m.layers))))
        x = rng.normal(size=m.input_dim)
        logits, rep = forward(m, x)
        o_logits, o_rep = naive_forward(m, x)
        np.testing.assert_allclose(logits, o_logits, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(rep, o_rep, rtol=1e-12, atol=1e-12)
        assert rep.shape == (m.repr_dim,)


def test_forward_input_dim_checked():
    m = init_model(mlp_spec([3, 4, 2]))
    with pytest.raises(InputError):
        forward(m, [1.0, 2.0])


def test_forward_is_pure():
    m = init_model(mlp_spec([5, 7, 3]), seed=2)
    x = np.linspace(-1, 1, 5)
    before = m.params.copy()
    a = forward(m, x)
    b = forward(m, x)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    np.testing.assert_array_equal(m.params, before)
    with pytest.raises(ValueError):
        m.params[0] = 1.0


def test_softmax_hand_values():
    np.testing.assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(softmax(np.zeros(4)), np.full(4, 0.25))
    # stable for huge logits
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_predict_proba_on_simplex(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    p = predict_proba(m, rng.normal(scale=10, size=m.input_dim))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-9


def test_loss_of_zero_logit_model_is_log_c():
    for C in (2, 3, 7):
        m = Model((LayerSpec(3, C, "identity"),), np.zeros(4 * C), 0)
        batch = [(np.ones(3), 0), (np.arange(3.0), C - 1)]
        loss, _ = loss_and_grad(m, batch)
        assert loss == pytest.approx(math.log(C), abs=1e-15)


def test_saturated_correct_prediction_has_near_zero_loss():
    m = Model((LayerSpec(1, 2, "identity"),), np.array([0.0, 0.0, 50.0, -50.0]), 0)
    loss, _ = loss_and_grad(m, [(np.zeros(1), 0)])
    assert loss < 1e-12


def test_wrong_saturated_prediction_is_clamped():
    m = Model((LayerSpec(1, 2, "identity"),), np.array([0.0, 0.0, 1000.0, -1000.0]), 0)
    loss, grad = loss_and_grad(m, [(np.zeros(1), 1)])
    assert loss == pytest.approx(-math.log(1e-12))
    assert np.all(np.isfinite(grad))


def test_empty_batch_rejected():
    m = init_model(mlp_spec([2, 2]))
    with pytest.raises(InputError):
        loss_and_grad(m, [])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m = random_model(rng)
        n = int(rng.integers(1, 6))
        batch = Samples(rng.normal(size=(n, m.input_dim)), rng.integers(0, m.num_classes, size=n))
        _, g = loss_and_grad(m, batch)
        fd = finite_diff(m, batch)
        assert np.all(np.isfinite(g))
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_sgd_step_examples():
    m = Model((LayerSpec(1, 1, "identity"),), np.array([1.0, 1.0]), 0)
    out = sgd_step(m, np.array([2.0, -2.0]), 0.5)
    np.testing.assert_array_equal(out.params, [0.0, 2.0])
    np.testing.assert_array_equal(sgd_step(m, np.array([2.0, -2.0]), 0.0).params, m.params)
    np.testing.assert_array_equal(sgd_step(m, np.zeros(2), 0.3).params, m.params)
    np.testing.assert_array_equal(m.params, [1.0, 1.0])  # input untouched


def test_sgd_decreases_convex_quadratic():
    # single linear layer with a mean-squared-error surrogate, gradient by hand
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 3))
    T = X @ rng.normal(size=(3, 2)) + 0.1 * rng.normal(size=(40, 2))
    m = init_model([LayerSpec(3, 2, "identity")], seed=1)

    def mse_and_grad(model):
        logits, _ = forward_batch(model, X)
        r = logits - T
        gW = X.T @ r * (2 / len(X))
        gb = r.sum(axis=0) * (2 / len(X))
        return float(np.mean(np.sum(r * r, axis=1))), np.concatenate([gW.ravel(), gb])

    prev = math.inf
    for _ in range(100):
        loss, g = mse_and_grad(m)
        assert loss <= prev + 1e-12
        prev = loss
        m = sgd_step(m, g, 0.05)


def test_model_round_trip():
    m = init_model(mlp_spec([4, 6, 5, 3]), repr_index=0, seed=9)
    m = m.with_params(m.params.astype(np.float32).astype(np.float64))
    blob = save_model(m)
    assert blob[:4] == b"FMNN"
    back = load_model(blob)
    assert back.layers == m.layers and back.repr_index == 0
    np.testing.assert_array_equal(back.params, m.params)


def test_model_load_rejects_garbage():
    blob = save_model(init_model(mlp_spec([2, 3, 2])))
    with pytest.raises(FormatError):
        load_model(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_model(blob[:-3])
    with pytest.raises(FormatError):
        load_model(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
