"""Array kernels shared by the inference path and the training tape.

Both paths call the same functions in the same order so that a trained
network evaluated through :mod:`vlq.infer` reproduces the training-time
forward bit for bit.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    """(N, C, H, W) -> (N*OH*OW, C*k*k) patch matrix, columns ordered (C, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return cols, oh, ow


def col2im(gcols: np.ndarray, x_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = conv_output_size(h, kernel, stride, pad)
    ow = conv_output_size(w, kernel, stride, pad)
    g = gcols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def cols_to_nchw(y: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    return y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def nchw_to_cols(y: np.ndarray) -> np.ndarray:
    return y.transpose(0, 2, 3, 1).reshape(-1, y.shape[1])


def conv2d_float(x, weight, stride, pad, bias=None):
    cols, oh, ow = im2col(x, weight.shape[2], stride, pad)
    y = cols @ weight.reshape(weight.shape[0], -1).T
    if bias is not None:
        y = y + bias
    return cols_to_nchw(y, x.shape[0], oh, ow)


def rescale(acc, sums, z, s_w, s_a):
    """Integer accumulator plus compensation term, scaled to real units.

    ``acc`` holds sum(w*a) over each receptive field and ``sums`` the
    receptive-field activation sums; both are exact integers.
    """
    return (acc + z * sums) * s_w * s_a


def batchnorm_eval(x, mean, var, scale, shift, eps=BN_EPS):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean.reshape(shape)) * (inv * scale).reshape(shape) + shift.reshape(shape)


def relu(x):
    return np.maximum(x, 0.0)


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def linear(x, weight, bias=None):
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
