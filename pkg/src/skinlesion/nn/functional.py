"""Stateless forward operations over NCHW arrays (thin wrappers over the layer kinds)."""
from __future__ import annotations

import numpy as np

from . import layers as L


def conv2d(x, w, b=None, stride=1, padding="same"):
    kh = w.shape[0]
    layer = L.Conv2D(w.shape[3], kh, stride, padding, bias=b is not None)
    params = {"w": w} if b is None else {"w": w, "b": b}
    return layer.forward([x], params, {}, False, None)[0]


def depthwise_conv2d(x, w, stride=1, padding="same"):
    return L.DepthwiseConv2D(w.shape[0], stride, padding).forward([x], {"w": w}, {}, False, None)[0]


def maxpool2d(x, k=2, stride=2, padding="valid"):
    layer = L.MaxPool2D(k, stride, padding)
    layer.output_shape([x.shape[1:]])
    return layer.forward([x], {}, {}, False, None)[0]


def avgpool2d(x, k=2, stride=2):
    layer = L.AvgPool2D(k, stride)
    layer.output_shape([x.shape[1:]])
    return layer.forward([x], {}, {}, False, None)[0]


def global_avgpool(x):
    return L.GlobalAvgPool().forward([x], {}, {}, False, None)[0]


def batchnorm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.9, eps=1e-5):
    """Batch normalization; in train mode `running_mean`/`running_var` are updated in place."""
    buffers = {"mean": running_mean, "var": running_var}
    layer = L.BatchNorm(momentum, eps)
    return layer.forward([x], {"gamma": gamma, "beta": beta}, buffers, mode == "train", None)[0]


def dense(x, w, b=None):
    params = {"w": w} if b is None else {"w": w, "b": b}
    return L.Dense(w.shape[1], bias=b is not None).forward([x], params, {}, False, None)[0]


def dropout(x, rate=0.5, mode="train", seed=0):
    layer = L.Dropout(rate)
    return layer.forward([x], {}, {}, mode == "train", np.random.default_rng(seed))[0]


def relu(x):
    return np.maximum(x, 0)


def add(*xs):
    return L.Add().forward(list(xs), {}, {}, False, None)[0]


def concat(*xs):
    return L.Concat().forward(list(xs), {}, {}, False, None)[0]


def flatten(x):
    return x.reshape(x.shape[0], -1)
