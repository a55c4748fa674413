import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import layer_norm_two_pass, matmul_loop, mha_loop, mlp_loop, softmax_direct
from widthformer.numeric import (
    ConfigError, EvaluationError, LayerNorm, Linear, Mlp, MultiHeadAttention, ShapeError, count_macs,
    grad_check, layer_norm, make_rng, matmul, mha, mlp_forward, read_tensor, softmax, write_tensor,
)


def test_matmul_identity_and_dot():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])


def test_matmul_matches_triple_loop():
    rng = make_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.max(np.abs(matmul(a, b) - matmul_loop(a, b))) <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(1, 16)] * 4), st.integers(0, 2**32 - 1))
def test_matmul_associative(dims, seed):
    m, k, n, p = dims
    rng = make_rng(seed)
    a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
    assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) <= 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    big = softmax(np.array([1000.0, 0.0, 0.0]))
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0, 0.0], atol=1e-300)
    assert np.max(np.abs(softmax(np.array([1.0, 2.0, 3.0])) - softmax_direct([1.0, 2.0, 3.0]))) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6)), st.sampled_from([0, 1]))
def test_softmax_sums_to_one(x, axis):
    y = softmax(x, axis=axis)
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=axis) - 1)) <= 1e-9


def test_layer_norm_examples():
    np.testing.assert_array_equal(layer_norm(np.full(4, 3.0), np.ones(4), np.zeros(4)), np.zeros(4))
    np.testing.assert_allclose(layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-15), [1.0, -1.0],
                               atol=1e-12)
    rng = make_rng(2)
    x, g, b = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
    assert np.max(np.abs(layer_norm(x, g, b) - layer_norm_two_pass(x, g, b, 1e-5))) <= 1e-9


def test_layer_norm_moments():
    x = make_rng(3).normal(size=(20, 8)) * 5 + 2
    y = layer_norm(x, np.ones(8), np.zeros(8), eps=1e-12)
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-9
    assert np.max(np.abs(y.var(axis=-1) - 1)) <= 1e-6


def test_mha_single_key_returns_value():
    rng = make_rng(4)
    value = rng.normal(size=(1, 8))
    out = mha(rng.normal(size=(3, 8)), rng.normal(size=(1, 8)), value, 2, MultiHeadAttention.identity(8, 2))
    np.testing.assert_allclose(out, np.repeat(value, 3, axis=0), atol=1e-15)


def test_mha_identical_keys_average_values():
    rng = make_rng(5)
    key = np.tile(rng.normal(size=(1, 8)), (5, 1))
    value = rng.normal(size=(5, 8))
    out = mha(rng.normal(size=(3, 8)), key, value, 2, MultiHeadAttention.identity(8, 2))
    assert np.max(np.abs(out - value.mean(axis=0))) <= 1e-12


def test_mha_matches_per_head_loop():
    rng = make_rng(6)
    params = MultiHeadAttention.init(rng, 8, 2)
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    assert np.max(np.abs(mha(q, k, v, 2, params) - mha_loop(q, k, v, params))) <= 1e-9


def test_mha_head_count_must_divide_channels():
    with pytest.raises(ConfigError):
        MultiHeadAttention.init(make_rng(0), 8, 3)


def test_mlp_forward_examples():
    x = make_rng(7).normal(size=(4, 5))
    np.testing.assert_array_equal(mlp_forward(Mlp([Linear.identity(5)]), x), x)
    bias = np.arange(3.0)
    np.testing.assert_array_equal(mlp_forward(Mlp([Linear(np.zeros((3, 5)), bias)]), x), np.tile(bias, (4, 1)))
    m = Mlp.init(make_rng(8), [5, 7, 3])
    expected = np.array([mlp_loop(m, row) for row in x])
    assert np.max(np.abs(mlp_forward(m, x) - expected)) <= 1e-12


def test_mlp_rejects_bad_chain_and_input():
    rng = make_rng(9)
    with pytest.raises(ShapeError):
        Mlp([Linear.init(rng, 4, 5), Linear.init(rng, 6, 2)])
    with pytest.raises(ShapeError):
        Mlp.init(rng, [4, 2])(np.ones((3, 5)))


def test_grad_check_quadratic():
    x = np.array([1.0, 2.0])
    assert grad_check(lambda v: float(v @ v), x, 2 * x, h=1e-5) <= 1e-8


def test_grad_check_linear_sum_is_column_sums():
    layer = Linear.init(make_rng(10), 4, 3)
    x = make_rng(11).normal(size=4)
    _, cache = layer.forward(x)
    dx, _ = layer.backward(np.ones(3), cache)
    np.testing.assert_allclose(dx, layer.weight.sum(axis=0), rtol=0, atol=1e-15)
    assert grad_check(lambda v: float(layer(v).sum()), x, dx) <= 1e-8


def test_grad_check_non_finite():
    with pytest.raises(EvaluationError):
        grad_check(lambda v: float("nan"), np.ones(2), np.zeros(2))


def test_layer_norm_backward():
    rng = make_rng(12)
    ln = LayerNorm(rng.normal(size=6), rng.normal(size=6))
    x, r = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    _, cache = ln.forward(x)
    dx, _ = ln.backward(r, cache)
    assert grad_check(lambda v: float(np.sum(r * ln(v))), x, dx) <= 1e-6


def test_rng_bit_reproducible():
    a = make_rng(42, 7).normal(size=100)
    b = make_rng(42, 7).normal(size=100)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != make_rng(42, 8).normal(size=100).tobytes()


def test_mac_counter_scopes():
    rng = make_rng(13)
    layer = Linear.init(rng, 4, 3)
    with count_macs() as counts:
        layer(np.ones((5, 4)))
    assert counts == {"proj": 60}


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_bvt1_roundtrip(tmp_path, dtype):
    x = make_rng(14).normal(size=(2, 3, 4))
    path = tmp_path / "x.bvt"
    write_tensor(path, x, dtype)
    raw = path.read_bytes()
    assert raw[:4] == b"BVT1"
    assert raw[4] == (0 if dtype == "f32" else 1) and raw[5] == 3
    assert int.from_bytes(raw[6:14], "little") == 2
    back = read_tensor(path)
    assert back.shape == x.shape
    np.testing.assert_array_equal(back, x.astype(np.float32 if dtype == "f32" else np.float64))


def test_bvt1_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bvt"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError):
        read_tensor(path)
