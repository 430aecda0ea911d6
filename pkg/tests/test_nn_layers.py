import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_conv2d, brute_pool, cross_entropy
from skinlesion.nn import (AdamState, ShapeError, adam_step, add, avgpool2d, batchnorm, concat, conv2d, dense,
                           depthwise_conv2d, dropout, flatten, global_avgpool, maxpool2d, relu,
                           softmax_cross_entropy)
from skinlesion.nn.layers import make_layer, pad_amounts


def test_conv_same_keeps_size():
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64))
    w = np.random.default_rng(1).standard_normal((3, 3, 3, 8))
    assert conv2d(x, w).shape == (1, 8, 64, 64)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 7, 9))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1
    assert np.allclose(conv2d(x, w), x)


def test_conv_ones_kernel_values():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    y = conv2d(x, np.ones((3, 3, 1, 1)))
    assert y[0, 0, 1, 1] == 45  # sum 1..9
    assert y[0, 0, 0, 0] == 12  # 1 + 2 + 4 + 5


@pytest.mark.parametrize("k,stride,padding,h", [(3, 1, "same", 6), (3, 2, "same", 7), (1, 2, "same", 6),
                                                 (5, 1, "valid", 8), (2, 2, "same", 5), (3, 2, "valid", 9)])
def test_conv_matches_loop_oracle(k, stride, padding, h):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, h, h + 1))
    w = rng.standard_normal((k, k, 3, 4))
    b = rng.standard_normal(4)
    oh, pt, _ = pad_amounts(h, k, stride, padding)
    ow, pl, _ = pad_amounts(h + 1, k, stride, padding)
    expect = brute_conv2d(x, w, b, stride, pt, pl, oh, ow)
    assert np.allclose(conv2d(x, w, b, stride, padding), expect, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 3, 5, 7]), st.integers(7, 12), st.integers(7, 12))
def test_conv_same_stride1_preserves_dims(k, h, w):
    x = np.zeros((1, 2, h, w))
    assert conv2d(x, np.zeros((k, k, 2, 3))).shape == (1, 3, h, w)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 5, 5)), np.zeros((3, 3, 3, 1)))


def test_depthwise():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 6, 6))
    ident = np.zeros((3, 3, 2))
    ident[1, 1, :] = 1
    assert np.allclose(depthwise_conv2d(x, ident), x)
    assert depthwise_conv2d(np.zeros((1, 4, 32, 32)), np.zeros((3, 3, 4)), stride=2).shape == (1, 4, 16, 16)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 3, 2))
    per_channel = np.concatenate([conv2d(x[:, c:c + 1], w[:, :, c:c + 1, None]) for c in range(2)], axis=1)
    assert np.allclose(depthwise_conv2d(x, w), per_channel)
    with pytest.raises(ShapeError):
        depthwise_conv2d(x, np.zeros((3, 3, 3)))


def test_pools():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert maxpool2d(x, 2, 2)[0, 0, 0, 0] == 4
    assert avgpool2d(x, 2, 2)[0, 0, 0, 0] == 2.5
    assert maxpool2d(np.zeros((1, 1, 64, 64)), 2, 2).shape == (1, 1, 32, 32)
    const = np.full((1, 2, 6, 6), 3.5)
    assert np.all(maxpool2d(const, 2, 2) == 3.5) and np.all(avgpool2d(const, 2, 2) == 3.5)
    assert np.all(global_avgpool(const) == 3.5)
    with pytest.raises(ShapeError):
        maxpool2d(np.zeros((1, 1, 2, 2)), 3, 1)


def test_pools_match_oracle():
    x = np.random.default_rng(3).standard_normal((2, 3, 8, 8))
    assert np.allclose(avgpool2d(x, 2, 2), brute_pool(x, 2, 2, np.mean), atol=1e-6)
    assert np.array_equal(maxpool2d(x, 3, 2), brute_pool(x, 3, 2, np.max))
    assert np.allclose(global_avgpool(x).reshape(2, 3), x.mean(axis=(2, 3)))


def test_batchnorm():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 3, 5, 5)) * 3 + 2
    g, b = np.ones(3), np.zeros(3)
    mean, var = np.zeros(3), np.ones(3)
    y = batchnorm(x, g, b, mean, var, "train")
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    # running stats moved toward the batch statistics with momentum 0.9
    assert np.allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    # {1, 3}: mean 2, population variance 1
    pair = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out = batchnorm(pair, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), "train")
    assert np.allclose(out.ravel(), np.array([-1, 1]) / math.sqrt(1 + 1e-5))
    z = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    assert np.allclose(batchnorm(z, g, b, np.zeros(3), np.ones(3), "train"), z, atol=1e-5)
    # eval mode uses running statistics and is deterministic
    e1 = batchnorm(x, g, b, np.full(3, 2.0), np.full(3, 4.0), "eval")
    assert np.allclose(e1, (x - 2) / np.sqrt(4 + 1e-5))
    with pytest.raises(ValueError):
        batchnorm(np.zeros((0, 3, 2, 2)), g, b, mean, var, "train")


def test_dense():
    x = np.array([[1.0, 2.0]])
    assert dense(x, np.ones((2, 1)), np.array([0.5]))[0, 0] == 3.5
    v = np.random.default_rng(5).standard_normal((4, 6))
    assert np.allclose(dense(v, np.eye(6), np.zeros(6)), v)
    with pytest.raises(ShapeError):
        dense(np.zeros((1, 3)), np.zeros((2, 7)))


def test_dropout():
    x = np.random.default_rng(6).standard_normal((10, 10_000))
    assert np.array_equal(dropout(x, 0.5, "eval"), x)
    assert np.array_equal(dropout(x, 0.0, "train"), x)
    ones = np.ones(100_000)[None]
    y = dropout(ones, 0.5, "train", seed=7)
    kept = y != 0
    assert abs(kept.mean() - 0.5) <= 0.01
    assert np.all(y[kept] == 2.0)
    with pytest.raises(ValueError):
        make_layer("dropout", rate=1.0)


def test_structural():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.random.default_rng(8).standard_normal((2, 3, 4, 4))
    assert np.array_equal(add(x, np.zeros_like(x)), x)
    assert concat(x, x[:, :1]).shape == (2, 4, 4, 4)
    assert flatten(np.zeros((1, 64, 32, 32))).shape == (1, 65536)
    with pytest.raises(ShapeError):
        add(x, x[:, :2])
    with pytest.raises(ShapeError):
        concat(x, x[:, :, :2])


def test_softmax_cross_entropy():
    loss, probs = softmax_cross_entropy(np.zeros((1, 7)), [3])
    assert loss == pytest.approx(math.log(7), abs=1e-6)
    assert np.allclose(probs.sum(axis=1), 1)
    loss, _ = softmax_cross_entropy(np.array([[1000.0, 0, 0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-9)
    loss, _ = softmax_cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2])
    assert loss == pytest.approx(0.40761, abs=1e-5)
    assert loss == pytest.approx(cross_entropy([1.0, 2.0, 3.0], 2), abs=1e-12)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 7)), [7])


def test_adam():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState())
    assert p["w"][0] == pytest.approx(0.999000, abs=1e-6)

    q = {"w": np.array([0.3, -2.0])}
    st_ = AdamState()
    for _ in range(5):
        adam_step(q, {"w": np.zeros(2)}, st_)
    assert np.array_equal(q["w"], [0.3, -2.0])

    small, big = {"w": np.array([1.0])}, {"w": np.array([1.0])}
    adam_step(small, {"w": np.array([0.5])}, AdamState())
    adam_step(big, {"w": np.array([0.5e6])}, AdamState())
    assert big["w"][0] == pytest.approx(small["w"][0], abs=1e-9)


def test_adam_matches_hand_evaluation():
    # three steps of the textbook update, evaluated independently
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    grads = [0.3, -0.1, 0.7]
    p, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    q = {"w": np.array([0.5])}
    state = AdamState()
    for g in grads:
        adam_step(q, {"w": np.array([g])}, state)
    assert q["w"][0] == pytest.approx(p, abs=1e-7)
