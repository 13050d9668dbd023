"""Forward kernels and vector-Jacobian products for the network's layers.

Forward kernels accumulate every output element in a fixed order (bias first,
then input channel, kernel row, kernel column) using separate multiply and add
steps, so they agree bit-for-bit with a scalar nested-loop implementation.
Backward kernels only need to be exact up to rounding and use BLAS freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from supunet.tensor import ShapeError


@dataclass(frozen=True)
class PoolRecord:
    """Flat input offsets of the winning element for every pooled cell."""

    offsets: np.ndarray
    input_shape: tuple


def _check_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv expects rank-4 input and kernels, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with "same" zero padding (odd kernels only).

    ``weight`` is (out_channels, in_channels, kh, kw). Out-of-range reads
    contribute ``0 * k`` terms, exactly as a padded scalar loop would.
    """
    _check_conv(x, weight, bias)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same-padded conv needs odd kernel sizes, got {kh}x{kw}")
    xp = _pad(x, kh // 2, kw // 2)
    out = np.empty((n, cout, h, w))
    out[...] = bias[None, :, None, None]
    for j in range(cin):
        for dy in range(kh):
            for dx in range(kw):
                tap = weight[:, j, dy, dx][None, :, None, None]
                out += xp[:, j : j + 1, dy : dy + h, dx : dx + w] * tap
    return out


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, cin*kh*kw, h*w) im2col matrix of a same-padded input."""
    n, cin, h, w = x.shape
    xp = _pad(x, kh // 2, kw // 2)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, cin, h, w, kh, kw
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, h * w)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d`."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if grad_out.shape != (n, cout, h, w):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {(n, cout, h, w)}")
    g = grad_out.reshape(n, cout, h * w)
    cols = np.ascontiguousarray(_patches(x, kh, kw))
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))

    dcols = np.matmul(weight.reshape(cout, -1).T, g)
    dcols = dcols.reshape(n, cin, kh, kw, h, w)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw))
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy : dy + h, dx : dx + w] += dcols[:, :, dy, dx]
    return dxp[:, :, ph : ph + h, pw : pw + w], grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    if x.shape != grad_out.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} != input {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2. Ties go to the lowest flat offset."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial size, got {h}x{w}")
    ho, wo = h // 2, w // 2
    # window order (0,0), (0,1), (1,0), (1,1) is increasing flat offset
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]

    ii, jj, yy, xx = np.indices((n, c, ho, wo))
    rows = 2 * yy + k // 2
    cols = 2 * xx + k % 2
    offsets = ((ii * c + jj) * h + rows) * w + cols
    return out, PoolRecord(offsets=offsets, input_shape=x.shape)


def maxpool2_backward(record: PoolRecord, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != record.offsets.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} != pooled {record.offsets.shape}")
    grad = np.zeros(int(np.prod(record.input_shape)))
    # windows are disjoint, so each offset appears once
    grad[record.offsets.ravel()] = grad_out.ravel()
    return grad.reshape(record.input_shape)


def upconv2(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution with 2x2 kernels, doubling h and w.

    ``out[o, 2y+dy, 2x+dx] = bias[o] + sum_j x[j, y, x] * weight[o, j, dy, dx]``
    accumulated over ``j`` in ascending order.
    """
    _check_conv(x, weight, bias)
    if weight.shape[2:] != (2, 2):
        raise ShapeError(f"up-convolution needs 2x2 kernels, got {weight.shape[2:]}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    out = np.empty((n, cout, h, 2, w, 2))
    out[...] = bias[None, :, None, None, None, None]
    for j in range(cin):
        tap = weight[:, j][None, :, None, :, None, :]  # 1, cout, 1, 2, 1, 2
        out += x[:, j][:, None, :, None, :, None] * tap
    return out.reshape(n, cout, 2 * h, 2 * w)


def conv_stride2(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Bias-free 2x2 stride-2 convolution sharing :func:`upconv2`'s kernels.

    ``weight`` is indexed (channels of ``x``, output channels, 2, 2); this is the
    adjoint of :func:`upconv2` and also its input gradient.
    """
    n, c, h2, w2 = x.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"stride-2 conv needs even spatial size, got {h2}x{w2}")
    if weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"kernel {weight.shape} incompatible with {c} input channels")
    win = x.reshape(n, c, h2 // 2, 2, w2 // 2, 2)
    out = np.tensordot(win, weight, axes=([1, 3, 5], [0, 2, 3]))  # n, y, x, j
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def upconv2_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`upconv2`."""
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if grad_out.shape != (n, cout, 2 * h, 2 * w):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {(n, cout, 2 * h, 2 * w)}")
    g = grad_out.reshape(n, cout, h, 2, w, 2)
    grad_w = np.tensordot(g, x, axes=([0, 2, 4], [0, 2, 3])).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return conv_stride2(grad_out, weight), grad_w, grad_b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_backward(a_channels: int, grad_out: np.ndarray):
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


def fc(x: np.ndarray, matrix: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``matrix @ x + bias`` for each row of ``x`` (n, in_dim).

    Each output is ``bias`` plus the products summed left to right over the
    input index, via a sequential ``add.accumulate``.
    """
    if x.ndim != 2 or matrix.ndim != 2 or x.shape[1] != matrix.shape[1]:
        raise ShapeError(f"fc input {x.shape} incompatible with matrix {matrix.shape}")
    if bias.shape != (matrix.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {matrix.shape[0]} outputs")
    n = x.shape[0]
    terms = np.empty((n, matrix.shape[0], matrix.shape[1] + 1))
    terms[:, :, 0] = bias
    np.multiply(x[:, None, :], matrix[None, :, :], out=terms[:, :, 1:])
    return np.add.accumulate(terms, axis=2)[:, :, -1]


def fc_backward(x: np.ndarray, matrix: np.ndarray, grad_out: np.ndarray):
    """Return (grad_x, grad_matrix, grad_bias) for :func:`fc`."""
    if grad_out.shape != (x.shape[0], matrix.shape[0]):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {(x.shape[0], matrix.shape[0])}")
    return grad_out @ matrix, grad_out.T @ x, grad_out.sum(axis=0)
