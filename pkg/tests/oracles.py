"""Slow, independent reference implementations used as test oracles.

These are written from the textbook definitions with explicit loops and share
no algorithmic code with the package.
"""
import itertools
import math

import numpy as np

from skinlesion.imaging import BoundingBox


def disk_offsets(radius):
    return [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)
            if dr * dr + dc * dc <= radius * radius]


def _clamped(img, r, c):
    h, w = img.shape
    return img[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]


def brute_dilate(img, radius):
    h, w = img.shape
    out = np.empty_like(img)
    for r in range(h):
        for c in range(w):
            out[r, c] = max(_clamped(img, r + dr, c + dc) for dr, dc in disk_offsets(radius))
    return out


def brute_erode(img, radius):
    h, w = img.shape
    out = np.empty_like(img)
    for r in range(h):
        for c in range(w):
            out[r, c] = min(_clamped(img, r + dr, c + dc) for dr, dc in disk_offsets(radius))
    return out


def brute_close(img, radius):
    return brute_erode(brute_dilate(img, radius), radius)


def brute_bottom_hat(img, radius):
    return brute_close(img, radius) - img


def brute_median(img, window):
    h, w = img.shape
    k = window // 2
    out = np.empty_like(img)
    for r in range(h):
        for c in range(w):
            vals = sorted(_clamped(img, r + dr, c + dc) for dr in range(-k, k + 1) for dc in range(-k, k + 1))
            out[r, c] = vals[len(vals) // 2]
    return out


def brute_conv2d(x, w, b, stride, pad_top, pad_left, out_h, out_w):
    """Direct nested-loop cross-correlation, NCHW input, KH x KW x Cin x Cout weights."""
    n, cin, h, wd = x.shape
    kh, kw, _, cout = w.shape
    y = np.zeros((n, cout, out_h, out_w))
    for i in range(n):
        for o in range(cout):
            for r in range(out_h):
                for c in range(out_w):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                rr, cc = r * stride + u - pad_top, c * stride + v - pad_left
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += x[i, ci, rr, cc] * w[u, v, ci, o]
                    y[i, o, r, c] = acc
    return y


def brute_pool(x, k, stride, reduce):
    n, ch, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    y = np.zeros((n, ch, oh, ow))
    for i, c, r, s in itertools.product(range(n), range(ch), range(oh), range(ow)):
        y[i, c, r, s] = reduce(x[i, c, r * stride:r * stride + k, s * stride:s * stride + k])
    return y


def brute_components(mask):
    """8-connected components by flood fill; returns a list of pixel sets."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack, comp = [(r, c)], set()
                seen[r, c] = True
                while stack:
                    pr, pc = stack.pop()
                    comp.add((pr, pc))
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            qr, qc = pr + dr, pc + dc
                            if 0 <= qr < h and 0 <= qc < w and mask[qr, qc] and not seen[qr, qc]:
                                seen[qr, qc] = True
                                stack.append((qr, qc))
                comps.append(comp)
    return comps


def logistic_regression_accuracy(x, y, classes, epochs=300, lr=0.5):
    """Plain full-batch softmax regression on flattened features; returns training accuracy."""
    x = x.reshape(len(x), -1).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    wt = np.zeros((x.shape[1], classes))
    onehot = np.eye(classes)[y]
    for _ in range(epochs):
        z = x @ wt
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        wt -= lr * x.T @ (p - onehot) / len(x)
    return float(np.mean(np.argmax(x @ wt, axis=1) == y))


def mask_iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    return np.count_nonzero(a & b) / max(np.count_nonzero(a | b), 1)


def cross_entropy(logits, label):
    m = max(logits)
    return -(logits[label] - m - math.log(sum(math.exp(v - m) for v in logits)))


def truth_box_256(lesion, size=256):
    """Ground-truth lesion box mapped from native pixels into the size x size frame."""
    rows = np.flatnonzero(lesion.any(axis=1))
    cols = np.flatnonzero(lesion.any(axis=0))
    sy, sx = size / lesion.shape[0], size / lesion.shape[1]
    top, bottom = round(rows[0] * sy), round((rows[-1] + 1) * sy)
    left, right = round(cols[0] * sx), round((cols[-1] + 1) * sx)
    return BoundingBox(top, left, bottom - top, right - left)
