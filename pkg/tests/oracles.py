"""Scalar nested-loop reference implementations used as independent oracles.

Each function walks the defining formula one element at a time with Python
floats, accumulating in the documented order (bias, then input channel,
kernel row, kernel column).
"""

import numpy as np


def conv2d(x, weight, bias):
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, h, w))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for xx in range(w):
                    acc = float(bias[o])
                    for j in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy, xs = y + dy - ph, xx + dx - pw
                                v = float(x[i, j, yy, xs]) if 0 <= yy < h and 0 <= xs < w else 0.0
                                acc = acc + v * float(weight[o, j, dy, dx])
                    out[i, o, y, xx] = acc
    return out


def upconv2(x, weight, bias):
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    out = np.zeros((n, cout, 2 * h, 2 * w))
    for i in range(n):
        for o in range(cout):
            out[i, o] = float(bias[o])
    # scatter every input element through the 2x2 kernel
    for i in range(n):
        for j in range(cin):
            for y in range(h):
                for xx in range(w):
                    for o in range(cout):
                        for dy in range(2):
                            for dx in range(2):
                                out[i, o, 2 * y + dy, 2 * xx + dx] = (
                                    out[i, o, 2 * y + dy, 2 * xx + dx]
                                    + float(x[i, j, y, xx]) * float(weight[o, j, dy, dx])
                                )
    return out


def conv_stride2(x, weight):
    """Bias-free 2x2 stride-2 convolution, kernel indexed (x channel, out, 2, 2)."""
    n, c, h2, w2 = x.shape
    cout = weight.shape[1]
    out = np.zeros((n, cout, h2 // 2, w2 // 2))
    for i in range(n):
        for o in range(cout):
            for y in range(h2 // 2):
                for xx in range(w2 // 2):
                    acc = 0.0
                    for j in range(c):
                        for dy in range(2):
                            for dx in range(2):
                                acc += float(x[i, j, 2 * y + dy, 2 * xx + dx]) * float(weight[j, o, dy, dx])
                    out[i, o, y, xx] = acc
    return out


def maxpool2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    offsets = np.zeros((n, c, h // 2, w // 2), dtype=np.int64)
    for i in range(n):
        for j in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    best, best_off = None, None
                    for dy in range(2):
                        for dx in range(2):
                            v = float(x[i, j, 2 * y + dy, 2 * xx + dx])
                            off = ((i * c + j) * h + 2 * y + dy) * w + 2 * xx + dx
                            if best is None or v > best:
                                best, best_off = v, off
                    out[i, j, y, xx] = best
                    offsets[i, j, y, xx] = best_off
    return out, offsets


def fc(x, matrix, bias):
    n, din = x.shape
    dout = matrix.shape[0]
    out = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            acc = float(bias[o])
            for k in range(din):
                acc = acc + float(matrix[o, k]) * float(x[i, k])
            out[i, o] = acc
    return out


def relu(x):
    return np.array([max(0.0, float(v)) for v in x.ravel()]).reshape(x.shape)


def concat_channels(a, b):
    n, ca, h, w = a.shape
    cb = b.shape[1]
    out = np.zeros((n, ca + cb, h, w))
    for i in range(n):
        for j in range(ca + cb):
            for y in range(h):
                for xx in range(w):
                    out[i, j, y, xx] = a[i, j, y, xx] if j < ca else b[i, j - ca, y, xx]
    return out


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f(x)
        flat[k] = orig - eps
        dn = f(x)
        flat[k] = orig
        g[k] = (up - dn) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
