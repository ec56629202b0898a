"""Differentiable float ops recorded on a :class:`Tape`."""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tape import Tape, Var


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(t: Tape, a: Var, b: Var) -> Var:
    sa, sb = np.shape(a.value), np.shape(b.value)
    return t.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def weighted_sum(t: Tape, terms, weights) -> Var:
    """sum_i weights[i] * terms[i] for scalar or same-shape terms."""
    weights = [float(w) for w in weights]
    value = sum(w * v.value for w, v in zip(weights, terms))
    return t.record(value, terms, lambda g: tuple(w * g for w in weights))


def detach(t: Tape, v: Var) -> Var:
    return t.const(v.value)


def relu(t: Tape, x: Var) -> Var:
    mask = x.value > 0
    return t.record(kernels.relu(x.value), (x,), lambda g: (g * mask,))


def tanh(t: Tape, x: Var) -> Var:
    y = np.tanh(x.value)
    return t.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(t: Tape, x: Var, shape) -> Var:
    orig = np.shape(x.value)
    return t.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def conv2d(t: Tape, x: Var, w: Var, stride: int, pad: int) -> Var:
    xv, wv = x.value, w.value
    o, c, k, _ = wv.shape
    cols, oh, ow = kernels.im2col(xv, k, stride, pad)
    wmat = wv.reshape(o, -1)
    y = kernels.cols_to_nchw(cols @ wmat.T, xv.shape[0], oh, ow)

    def back(g):
        gc = kernels.nchw_to_cols(g)
        gw = (gc.T @ cols).reshape(wv.shape) if w.needs_grad else None
        gx = kernels.col2im(gc @ wmat, xv.shape, k, stride, pad) if x.needs_grad else None
        return gx, gw

    return t.record(y, (x, w), back)


def linear(t: Tape, x: Var, w: Var, b: Var | None = None) -> Var:
    y = kernels.linear(x.value, w.value, None if b is None else b.value)

    def back(g):
        out = (g @ w.value, g.T @ x.value)
        return out if b is None else out + (g.sum(axis=0),)

    parents = (x, w) if b is None else (x, w, b)
    return t.record(y, parents, back)


def global_avg_pool(t: Tape, x: Var) -> Var:
    n, c, h, w = x.value.shape
    return t.record(
        kernels.global_avg_pool(x.value),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),),
    )


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_train(t: Tape, x: Var, gamma: Var, beta: Var, eps: float = kernels.BN_EPS):
    """Normalize with batch statistics; returns (output, batch mean, biased batch var)."""
    xv = x.value
    axes, shape = _bn_axes(xv), _bn_shape(xv)
    mean = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    y = kernels.batchnorm_eval(xv, mean, var, gamma.value, beta.value, eps)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(shape)) * inv.reshape(shape)
    m = xv.size // xv.shape[1]

    def back(g):
        sg = g.sum(axis=axes)
        sgx = (g * xhat).sum(axis=axes)
        gx = (gamma.value * inv / m).reshape(shape) * (m * g - sg.reshape(shape) - xhat * sgx.reshape(shape))
        return gx, sgx, sg

    return t.record(y, (x, gamma, beta), back), mean, var


def batchnorm_eval(t: Tape, x: Var, mean, var, gamma: Var, beta: Var, eps: float = kernels.BN_EPS) -> Var:
    xv = x.value
    axes, shape = _bn_axes(xv), _bn_shape(xv)
    y = kernels.batchnorm_eval(xv, mean, var, gamma.value, beta.value, eps)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(shape)) * inv.reshape(shape)
    return t.record(
        y,
        (x, gamma, beta),
        lambda g: (g * (gamma.value * inv).reshape(shape), (g * xhat).sum(axis=axes), g.sum(axis=axes)),
    )


def cross_entropy(t: Tape, logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels``."""
    z = logits.value
    n = z.shape[0]
    logp = kernels.log_softmax(z)
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[idx, labels] -= 1.0
        return (d * (g / n),)

    return t.record(np.asarray(loss), (logits,), back)


def _softmax_back(q, dq):
    return q * (dq - (dq * q).sum(axis=1, keepdims=True))


def kd_cosine(t: Tape, student: Var, teacher) -> Var:
    """Batch mean of 1 - cos(softmax(teacher), softmax(student)); teacher is a constant array."""
    p = kernels.softmax(np.asarray(teacher))
    q = kernels.softmax(student.value)
    n = q.shape[0]
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    cos = (p * q).sum(axis=1, keepdims=True) / (pn * qn)
    loss = float((1.0 - cos).mean())

    def back(g):
        dcos = p / (pn * qn) - cos * q / (qn * qn)
        return (_softmax_back(q, -dcos * (g / n)),)

    return t.record(np.asarray(loss), (student,), back)


def kd_kl(t: Tape, student: Var, teacher) -> Var:
    """Batch mean of KL(softmax(teacher) || softmax(student))."""
    logp = kernels.log_softmax(np.asarray(teacher))
    logq = kernels.log_softmax(student.value)
    p = np.exp(logp)
    n = p.shape[0]
    loss = float((p * (logp - logq)).sum(axis=1).mean())
    return t.record(np.asarray(loss), (student,), lambda g: ((np.exp(logq) - p) * (g / n),))
