"""Differentiable primitives.

All functions accept Tensors (or array-likes, promoted to constants) and
return Tensors. Elementwise ops broadcast numpy-style; gradients are
summed back to the operand shapes.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, RejectedInput
from .tensor import Tensor, as_tensor, make_node

LN_EPS = 1e-5


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def add(a, b):
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data + b.data
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    out = a.data - b.data
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "mul")


def div(a, b):
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "div")


def matmul(a, b):
    a = as_tensor(a)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise RejectedInput("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInput(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "matmul")


def exp(x):
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    out = np.log(x.data)
    return make_node(out, (x,), lambda g: (g / x.data,), "log")


def tanh(x):
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), back, "gelu")


def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape):
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a, b):
    out = np.swapaxes(x.data, a, b)
    return make_node(out, (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x, idx):
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, copy=True), (x,), back, "getitem")


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_node(out, (table,), back, "take_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(out, tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tuple(tensors), back, "stack")


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape).copy()
    return make_node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def softmax_rows(x, axis=-1):
    """Softmax along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), back, "log_softmax")


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Standardise the last axis (biased variance, ``eps`` inside the sqrt), then scale and shift."""
    x = as_tensor(x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gain, bias), back, "layer_norm")


def affine(x, W, b=None):
    """``x @ W + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if W.ndim != 2:
        raise RejectedInput(f"affine weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise RejectedInput(f"affine: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise RejectedInput(f"affine: bias shape {b.shape} != ({W.shape[1]},)")
    y = matmul(x, W)
    return y if b is None else add(y, b)


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return swapaxes(reshape(x, (*lead, n, heads, d // heads)), -2, -3)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, n, h * dh))


def attention(q, k, v, heads, mask=None, weights_out=None):
    """Multi-head scaled dot-product attention without projections.

    ``q``: (..., nq, d); ``k``, ``v``: (..., nk, d). ``mask`` is an additive
    array broadcastable to (..., heads, nq, nk). If ``weights_out`` is a
    list, the (..., heads, nq, nk) attention weights are appended to it.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise RejectedInput("query/key/value widths disagree")
    if k.shape[-2] != v.shape[-2]:
        raise RejectedInput("key and value row counts disagree")
    scale = 1.0 / math.sqrt(d // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), scale)
    if mask is not None:
        scores = add(scores, np.asarray(mask, dtype=scores.data.dtype))
    weights = softmax_rows(scores)
    if weights_out is not None:
        weights_out.append(weights.data)
    return _merge_heads(matmul(weights, vh))


def cross_attention(q, k, v, heads, w_out=None, b_out=None, mask=None, weights_out=None):
    """Attention of ``q`` rows over ``k``/``v`` rows, heads concatenated, then output-projected."""
    out = attention(q, k, v, heads, mask=mask, weights_out=weights_out)
    if w_out is not None:
        out = affine(out, w_out, b_out)
    return out


def nll_rows(logits, targets, mask):
    """Masked negative log-likelihood summed over positions.

    ``logits`` (..., T, V); ``targets`` int (..., T); ``mask`` (..., T) of 0/1.
    Returns the per-example sums, shape (...).
    """
    logp = log_softmax(logits)
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = sum(mul(logp, onehot * np.asarray(mask, dtype=logp.data.dtype)[..., None]), axis=-1)
    return mul(sum(picked, axis=-1), -1.0)
