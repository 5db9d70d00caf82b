import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import INSTANCES, TOL, numeric_grad, rel_err
from dreamkit import nn
from dreamkit.errors import NonFiniteError, ValidationError
from dreamkit.nn import checkpoint
from dreamkit.nn.layers import (Activation, BatchNorm, Conv2d, Dense, Dropout, Flatten, LayerSpec,
                                MaxPool2d)
from dreamkit.zoo import AttributeVector, build_model


def check_layer(layer, x, train=True, before=None):
    """Analytic vs central-difference gradients of sum(layer(x) * R) wrt x and every param."""
    r = np.random.default_rng(0).normal(size=layer.forward(x, train).shape)

    def loss():
        if before:
            before()
        return float(np.sum(layer.forward(x, train) * r))

    loss()
    dx = layer.backward(r)
    analytic = {k: v.copy() for k, v in layer.grads.items()}
    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    for k, p in layer.params.items():
        assert analytic[k].shape == p.shape
        assert rel_err(analytic[k], numeric_grad(loss, p)) < TOL, k


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dense(4, 3, rng)
    layer.params["b"][:] = rng.normal(size=3)
    check_layer(layer, rng.normal(size=(5, 4)))


@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("seed", range(INSTANCES))
def test_conv_gradients(seed, k):
    rng = np.random.default_rng(seed)
    layer = Conv2d(2, 3, k, rng)
    layer.params["b"][:] = rng.normal(size=3)
    check_layer(layer, rng.normal(size=(2, 2, 5, 4)))


@pytest.mark.parametrize("name", ["relu", "prelu", "elu", "tanh", "sigmoid"])
@pytest.mark.parametrize("seed", range(INSTANCES))
def test_activation_gradients(seed, name):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kinks
    check_layer(Activation(name), x)


@pytest.mark.parametrize("shape", [(6, 3), (3, 2, 3, 3)])
@pytest.mark.parametrize("seed", range(INSTANCES))
def test_batchnorm_gradients(seed, shape):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(shape[1])
    layer.params["gamma"][:] = rng.uniform(0.5, 1.5, size=shape[1])
    layer.params["beta"][:] = rng.normal(size=shape[1])
    check_layer(layer, rng.normal(size=shape) * 2 + 1)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_batchnorm_eval_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(3)
    layer.buffers["running_mean"][:] = rng.normal(size=3)
    layer.buffers["running_var"][:] = rng.uniform(0.5, 2, size=3)
    check_layer(layer, rng.normal(size=(4, 3)), train=False)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    check_layer(MaxPool2d(2), rng.normal(size=(2, 2, 5, 4)))


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_dropout_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Dropout(0.3, rng)

    def reseed():
        layer.rng = np.random.default_rng(seed + 100)

    reseed()
    check_layer(layer, rng.normal(size=(4, 5)), before=reseed)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_flatten_gradients(seed):
    rng = np.random.default_rng(seed)
    check_layer(Flatten(), rng.normal(size=(2, 3, 2, 2)))


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 4)) * 3
    labels = rng.integers(4, size=5)
    loss, probs, d = nn.softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: nn.softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_err(d, num) < TOL
    np.testing.assert_allclose(d, (probs - nn.one_hot(labels, 4)) / 5, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(INSTANCES))
def test_cross_entropy_on_probabilities_gradient(seed):
    rng = np.random.default_rng(seed)
    p = nn.softmax(rng.normal(size=(3, 4)), axis=1)
    y = nn.one_hot(rng.integers(4, size=3), 4)
    _, g = nn.cross_entropy(p, y)
    assert rel_err(g, numeric_grad(lambda: nn.cross_entropy(p, y)[0], p)) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_whole_network_gradient(seed):
    rng = np.random.default_rng(seed)
    attrs = AttributeVector("elu", False, True, True, 3, 2, 2, "sgd", 32)
    net = nn.Sequential.from_specs(build_model(attrs, 3, 6, conv_channels=2, fc_width=4), rng)
    x = rng.normal(size=(3, 1, 6, 6))
    y = rng.integers(3, size=3)

    def loss():
        return nn.softmax_cross_entropy(net.forward(x, train=True), y)[0]

    _, _, d = nn.softmax_cross_entropy(net.forward(x, train=True), y)
    dx = net.backward(d)
    grads = [g.copy() for g in net.grads()]
    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    for p, g in zip(net.params(), grads):
        assert rel_err(g, numeric_grad(loss, p)) < TOL


# ---------------------------------------------------------------------------
# forward examples


def test_dense_identity_forward():
    layer = Dense(3, 3, np.random.default_rng(0))
    layer.params["W"][:] = np.eye(3)
    np.testing.assert_array_equal(layer.forward(np.array([[1.0, 2.0, 3.0]]), False), [[1, 2, 3]])


def test_relu_forward():
    np.testing.assert_array_equal(Activation("relu").forward(np.array([[-1.0, 0.0, 2.0]]), False), [[0, 0, 2]])


def test_scalar_dense_backward():
    layer = Dense(1, 1, np.random.default_rng(0))
    layer.forward(np.array([[2.0]]), True)
    layer.backward(np.array([[1.0]]))
    assert layer.grads["W"][0, 0] == 2.0 and layer.grads["b"][0] == 1.0


def test_zero_upstream_gives_zero_grads(rng):
    attrs = AttributeVector("prelu", True, False, True, 3, 2, 2, "adam", 32)
    net = nn.Sequential.from_specs(build_model(attrs, 4, 6, conv_channels=2, fc_width=4), rng)
    out = net.forward(rng.normal(size=(3, 1, 6, 6)), train=True)
    net.backward(np.zeros_like(out))
    assert all(not np.any(g) for g in net.grads())


def test_maxpool_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert MaxPool2d(2).forward(x, False).ravel().tolist() == [4.0]


def test_batchnorm_normalises_batch(rng):
    x = rng.normal(3.0, 2.0, size=(50, 4))
    y = BatchNorm(4).forward(x, True)
    np.testing.assert_allclose(y.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(0), 1, atol=1e-4)  # eps in the denominator


def test_batchnorm_rejects_single_row_batch():
    with pytest.raises(ValidationError):
        BatchNorm(2).forward(np.ones((1, 2)), True)


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNorm(2)
    for _ in range(200):
        bn.forward(rng.normal(5.0, 3.0, size=(64, 2)), True)
    np.testing.assert_allclose(bn.buffers["running_mean"], 5, atol=0.5)
    np.testing.assert_allclose(bn.buffers["running_var"], 9, rtol=0.2)
    x = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(bn.forward(x, False), bn.forward(x, False))


def test_dropout_rate_statistics():
    d = Dropout(0.1, np.random.default_rng(7))
    out = d.forward(np.ones((1, 100_000)), True)
    frac = np.mean(out == 0)
    assert 0.095 <= frac <= 0.105
    np.testing.assert_allclose(out[out > 0], 1 / 0.9)
    np.testing.assert_array_equal(d.forward(np.ones((2, 3)), False), np.ones((2, 3)))


def test_layer_spec_validation():
    with pytest.raises(ValidationError):
        LayerSpec("conv2d", 1, 2, kernel_size=4)
    with pytest.raises(ValidationError):
        LayerSpec("activation", activation="swish")
    with pytest.raises(ValidationError):
        LayerSpec("dropout", rate=1.0)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ValidationError):
        Dense(3, 2, rng).forward(np.ones((2, 4)), False)
    with pytest.raises(ValidationError):
        Conv2d(2, 2, 3, rng).forward(np.ones((1, 3, 4, 4)), False)


def test_stale_cache_rejected(rng):
    net = nn.Sequential.from_specs([LayerSpec("dense", 2, 2)], rng)
    out = net.forward(np.ones((1, 2)), train=True)
    net.backward(np.ones_like(out))
    with pytest.raises(ValidationError, match="stale"):
        net.backward(np.ones_like(out))


def test_nonfinite_output_rejected(rng):
    net = nn.Sequential.from_specs([LayerSpec("dense", 2, 2)], rng)
    with pytest.raises(NonFiniteError):
        net.forward(np.array([[np.inf, 0.0]]))


# brute-force forward oracle on the 2-conv / 2-fc scheme


def _loop_conv(x, w, b):
    cout, cin, k, _ = w.shape
    h, wd = x.shape[1:]
    p = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                s = b[o]
                for c in range(cin):
                    for a in range(k):
                        for bb in range(k):
                            ii, jj = i + a - p, j + bb - p
                            if 0 <= ii < h and 0 <= jj < wd:
                                s += w[o, c, a, bb] * x[c, ii, jj]
                out[o, i, j] = s
    return out


def _loop_pool(x):
    c, h, w = x.shape
    return np.array([[[max(x[ch, 2 * i, 2 * j], x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i, 2 * j + 1],
                           x[ch, 2 * i + 1, 2 * j + 1]) for j in range(w // 2)] for i in range(h // 2)]
                     for ch in range(c)])


def _elu(v):
    return v if v > 0 else math.expm1(v)


def test_forward_matches_loop_oracle():
    attrs = AttributeVector("elu", True, True, True, 3, 2, 2, "sgd", 32)
    rng = np.random.default_rng(42)
    net = nn.Sequential.from_specs(build_model(attrs, 5, 12, conv_channels=3, fc_width=6), rng)
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            layer.buffers["running_mean"][:] = rng.normal(size=3)
            layer.buffers["running_var"][:] = rng.uniform(0.5, 2, size=3)
            layer.params["gamma"][:] = rng.uniform(0.5, 1.5, size=3)
            layer.params["beta"][:] = rng.normal(size=3)
    x = rng.uniform(size=(1, 1, 12, 12))
    got = net.forward(x, train=False)[0]

    a = x[0]
    layers = iter(net.layers)
    for _ in range(2):
        conv, bn, _pool, _act = next(layers), next(layers), next(layers), next(layers)
        a = _loop_conv(a, conv.params["W"], conv.params["b"])
        for c in range(a.shape[0]):
            mu, var = bn.buffers["running_mean"][c], bn.buffers["running_var"][c]
            a[c] = (a[c] - mu) / math.sqrt(var + 1e-5) * bn.params["gamma"][c] + bn.params["beta"][c]
        a = _loop_pool(a)
        a = np.vectorize(_elu)(a)
    v = list(a.ravel())
    next(layers)  # flatten
    for _ in range(2):
        dense, _act, _drop = next(layers), next(layers), next(layers)
        w, b = dense.params["W"], dense.params["b"]
        v = [_elu(sum(v[i] * w[i, j] for i in range(len(v))) + b[j]) for j in range(w.shape[1])]
    head = next(layers)
    w, b = head.params["W"], head.params["b"]
    want = [sum(v[i] * w[i, j] for i in range(len(v))) + b[j] for j in range(w.shape[1])]
    assert got.shape == (5,)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def test_softmax_examples():
    np.testing.assert_allclose(nn.softmax(np.zeros(3)), [1 / 3] * 3)
    np.testing.assert_allclose(nn.softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3])
    big = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.randoms(use_true_random=False))
def test_softmax_sums_to_one_and_is_permutation_equivariant(x, r):
    p = nn.softmax(x)
    assert abs(p.sum() - 1) < 1e-9
    assert np.all(p > 0) or np.all(p >= 0)
    perm = list(range(len(x)))
    r.shuffle(perm)
    np.testing.assert_allclose(nn.softmax(x[perm]), p[perm], rtol=1e-12, atol=1e-300)


def test_cross_entropy_examples():
    y = nn.one_hot(np.array([2]), 4)
    assert nn.cross_entropy(y, y)[0] == 0.0
    assert nn.cross_entropy(np.full((1, 4), 0.25), y)[0] == pytest.approx(math.log(4))
    with pytest.raises(ValidationError):
        nn.cross_entropy(np.full((1, 3), 1 / 3), y)


def test_cross_entropy_clamps_zero_probability():
    loss, g = nn.cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert loss == pytest.approx(-math.log(1e-12))
    assert np.all(np.isfinite(g))


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_examples():
    w = np.array([1.0])
    nn.SGD([w], 0.1).step([np.array([2.0])])
    assert w[0] == pytest.approx(0.8, abs=1e-15)
    w = np.array([1.0, -3.0])
    nn.SGD([w], 0.1).step([np.zeros(2)])
    np.testing.assert_array_equal(w, [1.0, -3.0])


def test_sgd_three_steps_closed_form():
    w = np.array([0.5])
    opt = nn.SGD([w], 0.05)
    gs = [1.0, -2.0, 0.5]
    for g in gs:
        opt.step([np.array([g])])
    assert abs(w[0] - (0.5 - 0.05 * sum(gs))) < 1e-12


def _adam_oracle(gs, lr, b1=0.9, b2=0.999, eps=1e-8, w=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


def test_adam_first_step_example():
    w = np.array([0.0])
    nn.Adam([w], 0.1).step([np.array([1.0])])
    assert abs(w[0] - (-0.1 / (1 + 1e-8))) < 1e-12


@pytest.mark.parametrize("gs", [[1.0, 1.0, 1.0], [0.3, -1.2, 2.5]])
def test_adam_three_steps_closed_form(gs):
    w = np.array([0.0])
    opt = nn.Adam([w], 0.1)
    for g, want in zip(gs, _adam_oracle(gs, 0.1)):
        opt.step([np.array([g])])
        assert abs(w[0] - want) < 1e-12
    assert opt.t == 3


def test_adam_constant_gradient_steps_are_lr():
    # with g constant, m_hat = g and v_hat = g^2 at every step
    w = np.array([0.0])
    opt = nn.Adam([w], 0.1)
    for t in range(1, 4):
        opt.step([np.array([1.0])])
        assert abs(w[0] - (-0.1 * t / (1 + 1e-8))) < 1e-12


def test_rmsprop_three_steps_closed_form():
    w = np.array([1.0])
    opt = nn.RMSprop([w], 0.01)
    sq, want = 0.0, 1.0
    for g in [2.0, -1.0, 0.5]:
        opt.step([np.array([g])])
        sq = 0.99 * sq + 0.01 * g * g
        want -= 0.01 * g / (math.sqrt(sq) + 1e-8)
        assert abs(w[0] - want) < 1e-12


@pytest.mark.parametrize("kind", ["sgd", "adam", "rmsprop"])
def test_zero_lr_leaves_params_bit_identical(kind, rng):
    w = rng.normal(size=(3, 4))
    before = w.copy()
    opt = nn.make_optimizer(kind, [w], 0.0)
    for _ in range(3):
        opt.step([rng.normal(size=(3, 4))])
    assert w.tobytes() == before.tobytes()


def test_optimizer_rejects_bad_gradients():
    w = np.zeros(2)
    opt = nn.Adam([w], 0.1)
    with pytest.raises(NonFiniteError):
        opt.step([np.array([np.nan, 0.0])])
    with pytest.raises(ValidationError):
        opt.step([np.zeros(3)])
    with pytest.raises(ValidationError):
        nn.make_optimizer("lbfgs", [w], 0.1)


def _train_small(seed):
    rng = np.random.default_rng(seed)
    attrs = AttributeVector("prelu", True, True, True, 3, 2, 2, "rmsprop", 32)
    net = nn.Sequential.from_specs(build_model(attrs, 3, 6, conv_channels=2, fc_width=4), rng)
    net.set_rng(np.random.default_rng([seed, 9]))
    opt = nn.make_optimizer("adam", net.params(), 0.01)
    data = np.random.default_rng(99)
    x, y = data.normal(size=(8, 1, 6, 6)), data.integers(3, size=8)
    for _ in range(5):
        _, _, d = nn.softmax_cross_entropy(net.forward(x, train=True), y)
        net.backward(d)
        opt.step(net.grads())
    return net


def test_training_is_bit_reproducible():
    a, b = _train_small(3), _train_small(3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = _train_small(1)
    path = tmp_path / "net.ckpt"
    checkpoint.save(path, net.state_dict(), {"note": "x"})
    arrays, meta = checkpoint.load(path)
    assert meta == {"note": "x"}
    for k, v in net.state_dict().items():
        assert arrays[k].tobytes() == v.tobytes() and arrays[k].shape == v.shape
    other = _train_small(2)
    other.load_state_dict(arrays)
    x = np.random.default_rng(5).normal(size=(2, 1, 6, 6))
    assert other.forward(x).tobytes() == net.forward(x).tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_checkpoint_round_trip_property(a):
    arrays_, _ = checkpoint.loads(checkpoint.dumps({"a": a}))
    assert arrays_["a"].tobytes() == np.ascontiguousarray(a).tobytes()


def test_checkpoint_corruption_rejected():
    blob = checkpoint.dumps({"w": np.arange(6.0).reshape(2, 3)}, {"k": 1})
    with pytest.raises(ValidationError, match="magic"):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValidationError, match="truncated"):
        checkpoint.loads(blob[:-8])
    with pytest.raises(ValidationError, match="trailing"):
        checkpoint.loads(blob + b"\0")


def test_load_state_dict_checks_shapes(rng):
    net = nn.Sequential.from_specs([LayerSpec("dense", 2, 3)], rng)
    with pytest.raises(ValidationError):
        net.load_state_dict({"0.W": np.zeros((3, 2)), "0.b": np.zeros(3)})
    with pytest.raises(ValidationError):
        net.load_state_dict({"0.W": np.zeros((2, 3))})
