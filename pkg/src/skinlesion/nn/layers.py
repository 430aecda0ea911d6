"""Layer kinds with explicit forward and backward passes.

Activations are NCHW (or N x D after flatten). Shapes handled by
``output_shape``/``param_shapes`` are per-sample, i.e. without the batch axis.
Convolution is cross-correlation; weights are stored KH x KW x Cin x Cout.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def pad_amounts(n: int, k: int, stride: int, padding: str):
    """Output length and (before, after) padding along one spatial axis.

    'same' follows the usual convention: ceil(n / stride) outputs, with any odd
    padding pixel placed after (bottom/right).
    """
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > n:
            raise ShapeError(f"window {k} larger than input {n}")
        return (n - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _spatial(shape, name):
    if len(shape) != 3:
        raise ShapeError(f"{name} expects a C x H x W input, got {shape}")
    return shape


class Layer:
    kind = ""
    arity = 1  # exact number of inputs; None means >= 2

    def __init__(self, **hp):
        self.hp = hp

    def output_shape(self, in_shapes):
        return in_shapes[0]

    def param_shapes(self, in_shapes):
        return {}

    def buffer_shapes(self, in_shapes):
        return {}

    def init_params(self, in_shapes, rng, dtype):
        return {}

    def init_buffers(self, in_shapes, dtype):
        return {}

    def forward(self, xs, params, buffers, train, rng):
        raise NotImplementedError

    def backward(self, dy, cache, params):
        raise NotImplementedError

    def describe(self):
        return ", ".join(f"{k}={v}" for k, v in self.hp.items())


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters, kernel=3, stride=1, padding="same", bias=True):
        super().__init__(filters=filters, kernel=kernel, stride=stride, padding=padding, bias=bias)

    def _geometry(self, shape):
        c, h, w = _spatial(shape, "conv2d")
        k, s, p = self.hp["kernel"], self.hp["stride"], self.hp["padding"]
        oh, pt, pb = pad_amounts(h, k, s, p)
        ow, pl, pr = pad_amounts(w, k, s, p)
        return c, oh, ow, (pt, pb, pl, pr)

    def output_shape(self, in_shapes):
        _, oh, ow, _ = self._geometry(in_shapes[0])
        return (self.hp["filters"], oh, ow)

    def param_shapes(self, in_shapes):
        c = _spatial(in_shapes[0], "conv2d")[0]
        k = self.hp["kernel"]
        shapes = {"w": (k, k, c, self.hp["filters"])}
        if self.hp["bias"]:
            shapes["b"] = (self.hp["filters"],)
        return shapes

    def init_params(self, in_shapes, rng, dtype):
        shapes = self.param_shapes(in_shapes)
        kh, kw, c, _ = shapes["w"]
        params = {"w": he_normal(rng, shapes["w"], kh * kw * c, dtype)}
        if "b" in shapes:
            params["b"] = np.zeros(shapes["b"], dtype)
        return params

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        n, c, h, w = x.shape
        w_ = params["w"]
        k, s = self.hp["kernel"], self.hp["stride"]
        if w_.shape[2] != c:
            raise ShapeError(f"conv2d expects {w_.shape[2]} input channels, got {c}")
        _, oh, ow, (pt, pb, pl, pr) = self._geometry((c, h, w))
        if k == 1 and not (pt or pb or pl or pr):
            xs_ = x[:, :, ::s, ::s][:, :, :oh, :ow]
            cols = xs_.transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
            cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * oh * ow, k * k * c)
        y = cols @ w_.reshape(-1, w_.shape[3])
        if "b" in params:
            y += params["b"]
        y = y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape, (oh, ow), (pt, pb, pl, pr))

    def backward(self, dy, cache, params):
        cols, (n, c, h, w), (oh, ow), (pt, pb, pl, pr) = cache
        k, s = self.hp["kernel"], self.hp["stride"]
        w_ = params["w"]
        cout = w_.shape[3]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
        grads = {"w": (cols.T @ dy2).reshape(w_.shape)}
        if "b" in params:
            grads["b"] = dy2.sum(axis=0)
        dcols = dy2 @ w_.reshape(-1, cout).T
        dxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=dy.dtype)
        if k == 1:
            dxp[:, :, 0:s * oh:s, 0:s * ow:s] += dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, oh, ow, k, k, c)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        return [dxp[:, :, pt:pt + h, pl:pl + w]], grads

    def describe(self):
        k, s = self.hp["kernel"], self.hp["stride"]
        return f"{k}x{k}x{self.hp['filters']} conv, stride {s}"


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv2d"

    def __init__(self, kernel=3, stride=1, padding="same"):
        super().__init__(kernel=kernel, stride=stride, padding=padding)

    def _geometry(self, shape):
        c, h, w = _spatial(shape, "depthwise_conv2d")
        k, s, p = self.hp["kernel"], self.hp["stride"], self.hp["padding"]
        oh, pt, pb = pad_amounts(h, k, s, p)
        ow, pl, pr = pad_amounts(w, k, s, p)
        return c, oh, ow, (pt, pb, pl, pr)

    def output_shape(self, in_shapes):
        c, oh, ow, _ = self._geometry(in_shapes[0])
        return (c, oh, ow)

    def param_shapes(self, in_shapes):
        k = self.hp["kernel"]
        return {"w": (k, k, in_shapes[0][0])}

    def init_params(self, in_shapes, rng, dtype):
        k = self.hp["kernel"]
        return {"w": he_normal(rng, (k, k, in_shapes[0][0]), k * k, dtype)}

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        n, c, h, w = x.shape
        wt = params["w"]
        if wt.shape[2] != c:
            raise ShapeError(f"depthwise_conv2d has {wt.shape[2]} filters for {c} channels")
        k, s = self.hp["kernel"], self.hp["stride"]
        _, oh, ow, (pt, pb, pl, pr) = self._geometry((c, h, w))
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        y = np.zeros((n, c, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                y += xp[:, :, i:i + s * oh:s, j:j + s * ow:s] * wt[i, j][None, :, None, None]
        return y, (xp, x.shape, (oh, ow), (pt, pl))

    def backward(self, dy, cache, params):
        xp, (n, c, h, w), (oh, ow), (pt, pl) = cache
        k, s = self.hp["kernel"], self.hp["stride"]
        wt = params["w"]
        dw = np.zeros_like(wt)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * oh, s), slice(j, j + s * ow, s))
                dw[i, j] = (dy * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += dy * wt[i, j][None, :, None, None]
        return [dxp[:, :, pt:pt + h, pl:pl + w]], {"w": dw}

    def describe(self):
        k = self.hp["kernel"]
        return f"{k}x{k} depthwise conv, stride {self.hp['stride']}"


class _Pool(Layer):
    def __init__(self, kernel=2, stride=2, padding="valid"):
        super().__init__(kernel=kernel, stride=stride, padding=padding)

    def _geometry(self, shape):
        c, h, w = _spatial(shape, self.kind)
        k, s, p = self.hp["kernel"], self.hp["stride"], self.hp["padding"]
        if k < 1 or s < 1:
            raise ValueError("pool window and stride must be >= 1")
        oh, pt, pb = pad_amounts(h, k, s, p)
        ow, pl, pr = pad_amounts(w, k, s, p)
        return c, oh, ow, (pt, pb, pl, pr)

    def output_shape(self, in_shapes):
        c, oh, ow, _ = self._geometry(in_shapes[0])
        return (c, oh, ow)

    def _windows(self, x, fill):
        n, c, h, w = x.shape
        k, s = self.hp["kernel"], self.hp["stride"]
        _, oh, ow, (pt, pb, pl, pr) = self._geometry((c, h, w))
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=fill) if (pt or pb or pl or pr) else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        return win.reshape(n, c, oh, ow, k * k), xp.shape, (oh, ow), (pt, pl)


class MaxPool2D(_Pool):
    kind = "maxpool2d"

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        win, pshape, out, pads = self._windows(x, -np.inf)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape, pshape, out, pads)

    def backward(self, dy, cache, params):
        idx, (n, c, h, w), pshape, (oh, ow), (pt, pl) = cache
        k, s = self.hp["kernel"], self.hp["stride"]
        dxp = np.zeros(pshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(idx == i * k + j, dy, 0)
        return [dxp[:, :, pt:pt + h, pl:pl + w]], {}

    def describe(self):
        k = self.hp["kernel"]
        return f"{k}x{k} max pool, stride {self.hp['stride']}"


class AvgPool2D(_Pool):
    kind = "avgpool2d"

    def __init__(self, kernel=2, stride=2, padding="valid"):
        if padding != "valid":
            raise ValueError("avgpool2d supports only valid padding")
        super().__init__(kernel, stride, padding)

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        win, _, out, _ = self._windows(x, 0)
        return win.mean(axis=-1), (x.shape, out)

    def backward(self, dy, cache, params):
        shape, (oh, ow) = cache
        k, s = self.hp["kernel"], self.hp["stride"]
        dx = np.zeros(shape, dtype=dy.dtype)
        g = dy / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += g
        return [dx], {}

    def describe(self):
        k = self.hp["kernel"]
        return f"{k}x{k} average pool, stride {self.hp['stride']}"


class GlobalAvgPool(Layer):
    kind = "global_avgpool"

    def output_shape(self, in_shapes):
        c, _, _ = _spatial(in_shapes[0], "global_avgpool")
        return (c, 1, 1)

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        return x.mean(axis=(2, 3), keepdims=True), x.shape

    def backward(self, dy, cache, params):
        n, c, h, w = cache
        return [np.broadcast_to(dy / (h * w), cache).copy()], {}

    def describe(self):
        return "global average pool"


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, momentum=0.9, eps=1e-5):
        super().__init__(momentum=momentum, eps=eps)

    def _channels(self, shape):
        return shape[0]

    def param_shapes(self, in_shapes):
        c = self._channels(in_shapes[0])
        return {"gamma": (c,), "beta": (c,)}

    def buffer_shapes(self, in_shapes):
        c = self._channels(in_shapes[0])
        return {"mean": (c,), "var": (c,)}

    def init_params(self, in_shapes, rng, dtype):
        c = self._channels(in_shapes[0])
        return {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype)}

    def init_buffers(self, in_shapes, dtype):
        c = self._channels(in_shapes[0])
        return {"mean": np.zeros(c, dtype), "var": np.ones(c, dtype)}

    @staticmethod
    def _axes(x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    @staticmethod
    def _bc(v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        if x.shape[0] == 0:
            raise ValueError("batchnorm needs a non-empty batch")
        eps = self.hp["eps"]
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.hp["momentum"]
            buffers["mean"][...] = m * buffers["mean"] + (1 - m) * mean
            buffers["var"][...] = m * buffers["var"] + (1 - m) * var
        else:
            mean, var = buffers["mean"], buffers["var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - self._bc(mean, x)) * self._bc(inv, x)
        y = xhat * self._bc(params["gamma"], x) + self._bc(params["beta"], x)
        return y.astype(x.dtype, copy=False), (xhat, inv, train)

    def backward(self, dy, cache, params):
        xhat, inv, train = cache
        axes = self._axes(dy)
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = self._bc(params["gamma"] * inv, dy)
        if not train:
            return [dy * g], grads
        m = dy.size // dy.shape[1]
        dx = g / m * (m * dy - self._bc(grads["beta"], dy) - xhat * self._bc(grads["gamma"], dy))
        return [dx.astype(dy.dtype, copy=False)], grads

    def describe(self):
        return "batch normalization"


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        return np.maximum(x, 0), x > 0

    def backward(self, dy, cache, params):
        return [dy * cache], {}

    def describe(self):
        return "ReLU"


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, bias=True):
        super().__init__(units=units, bias=bias)

    def _features(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"dense expects a flattened input, got {shape}")
        return shape[0]

    def output_shape(self, in_shapes):
        self._features(in_shapes[0])
        return (self.hp["units"],)

    def param_shapes(self, in_shapes):
        d = self._features(in_shapes[0])
        shapes = {"w": (d, self.hp["units"])}
        if self.hp["bias"]:
            shapes["b"] = (self.hp["units"],)
        return shapes

    def init_params(self, in_shapes, rng, dtype):
        d = self._features(in_shapes[0])
        params = {"w": he_normal(rng, (d, self.hp["units"]), d, dtype)}
        if self.hp["bias"]:
            params["b"] = np.zeros(self.hp["units"], dtype)
        return params

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        if x.ndim != 2 or x.shape[1] != params["w"].shape[0]:
            raise ShapeError(f"dense expects (N, {params['w'].shape[0]}) input, got {x.shape}")
        y = x @ params["w"]
        if "b" in params:
            y += params["b"]
        return y, x

    def backward(self, dy, cache, params):
        grads = {"w": cache.T @ dy}
        if "b" in params:
            grads["b"] = dy.sum(axis=0)
        return [dy @ params["w"].T], grads

    def describe(self):
        return f"{self.hp['units']} fully-connected"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        super().__init__(rate=rate)

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        rate = self.hp["rate"]
        if not train or rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
        return x * keep, keep

    def backward(self, dy, cache, params):
        return [dy if cache is None else dy * cache], {}

    def describe(self):
        return f"{self.hp['rate']} dropout"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shapes):
        return (int(np.prod(in_shapes[0])),)

    def forward(self, xs, params, buffers, train, rng):
        x = xs[0]
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params):
        return [dy.reshape(cache)], {}

    def describe(self):
        return "flatten"


class Add(Layer):
    kind = "add"
    arity = None

    def output_shape(self, in_shapes):
        if any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"add needs identical shapes, got {in_shapes}")
        return in_shapes[0]

    def forward(self, xs, params, buffers, train, rng):
        if any(x.shape != xs[0].shape for x in xs):
            raise ShapeError(f"add needs identical shapes, got {[x.shape for x in xs]}")
        y = xs[0].copy()
        for x in xs[1:]:
            y += x
        return y, len(xs)

    def backward(self, dy, cache, params):
        return [dy] * cache, {}

    def describe(self):
        return "add"


class Concat(Layer):
    kind = "concat"
    arity = None

    def output_shape(self, in_shapes):
        rest = {tuple(s[1:]) for s in in_shapes}
        if len(rest) != 1:
            raise ShapeError(f"concat needs matching spatial dims, got {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + tuple(in_shapes[0][1:])

    def forward(self, xs, params, buffers, train, rng):
        self.output_shape([x.shape[1:] for x in xs])
        return np.concatenate(xs, axis=1), np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(self, dy, cache, params):
        return np.split(dy, cache, axis=1), {}

    def describe(self):
        return "concat"


class Softmax(Layer):
    kind = "softmax"

    def forward(self, xs, params, buffers, train, rng):
        y = softmax(xs[0])
        return y, y

    def backward(self, dy, cache, params):
        p = cache
        return [p * (dy - (dy * p).sum(axis=1, keepdims=True))], {}

    def describe(self):
        return "softmax"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


LAYERS = {cls.kind: cls for cls in (
    Conv2D, DepthwiseConv2D, MaxPool2D, AvgPool2D, GlobalAvgPool, BatchNorm,
    ReLU, Dense, Dropout, Flatten, Add, Concat, Softmax,
)}


def make_layer(kind: str, **hp) -> Layer:
    try:
        cls = LAYERS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**hp)
