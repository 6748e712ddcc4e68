"""
Differentiable primitives.

Broadcasting is limited to leading batch dimensions: the smaller operand's
shape must equal a suffix of the larger one. Anything else is a ShapeError.
"""
import math

import numpy as np

from src.numerics.tensor import ShapeError, Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5
MASK_FILL = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


def _suffix_broadcast(op, a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    small, large = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) < len(large) and tuple(large[len(large) - len(small):]) == tuple(small):
        return large
    raise ShapeError(op, a_shape, b_shape)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast('add', a.shape, b.shape)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast('sub', a.shape, b.shape)

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast('mul', a.shape, b.shape)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, 'mul')


def scale(a, factor):
    a = as_tensor(a)

    def backward(g):
        return (g * factor,)

    return make_result(a.data * factor, (a,), backward, 'scale')


def matmul(a, b):
    """(..., n, k) @ (k, m) or (..., n, k) @ (..., k, m) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError('matmul', a.shape, b.shape)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, 'matmul')


def softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, 'softmax')


def log_softmax_array(logits):
    """Numerically stable log-softmax of a plain array over its last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError('layer_norm', x.shape, gain.shape)
    if bias.shape != (d,):
        raise ShapeError('layer_norm', x.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_result(xhat * gain.data + bias.data, (x, gain, bias), backward, 'layer_norm')


def gelu(x):
    """tanh approximation of GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    y = 0.5 * x.data * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        dy = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th ** 2) * du
        return (g * dy,)

    return make_result(y, (x,), backward, 'gelu')


def embedding(weight, ids):
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError('embedding', weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f'embedding: token id out of range [0, {weight.shape[0]}): '
                         f'min {ids.min()}, max {ids.max()}')

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return make_result(weight.data[ids], (weight,), backward, 'embedding')


def cross_entropy(logits, targets, weights):
    """Weighted sum of per-position negative log-likelihoods.

    logits (..., K); targets and weights (...). Positions with weight zero may
    carry any target id.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logits.dtype)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError('cross_entropy', logits.shape, targets.shape)
    if weights.shape != targets.shape:
        raise ShapeError('cross_entropy', targets.shape, weights.shape)
    K = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ValueError(f'cross_entropy: target id out of range [0, {K})')
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    value = -(weights * picked).sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * weights[..., None] * grad,)

    return make_result(np.asarray(value, dtype=logits.dtype), (logits,), backward, 'cross_entropy')


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', x.shape, shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(y, (x,), backward, 'reshape')


def transpose(x, axes=()):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError('transpose', x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward, 'transpose')


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y), (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(y), (x,), backward, 'mean')


def attention_mask(scores, keep):
    """Replace attention scores where `keep` is False by a large negative constant.

    `keep` is a boolean array numpy-broadcastable to the scores.
    """
    scores = as_tensor(scores)
    keep = np.asarray(keep, dtype=bool)
    try:
        keep = np.broadcast_to(keep, scores.shape)
    except ValueError:
        raise ShapeError('attention_mask', scores.shape, keep.shape) from None
    y = np.where(keep, scores.data, np.asarray(MASK_FILL, dtype=scores.dtype))

    def backward(g):
        return (np.where(keep, g, 0.0).astype(g.dtype),)

    return make_result(y, (scores,), backward, 'attention_mask')


def dropout(x, rate, rng):
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, 'dropout')


def scaled_dot_product_attention(q, k, v, keep=None):
    """softmax(q k^T / sqrt(d) [masked]) v over (..., heads, length, d) tensors."""
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    if keep is not None:
        scores = attention_mask(scores, keep)
    return matmul(softmax(scores), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


__all__ = ['Tensor', 'add', 'sub', 'mul', 'scale', 'matmul', 'softmax', 'layer_norm', 'gelu',
           'embedding', 'cross_entropy', 'reshape', 'transpose', 'sum', 'mean', 'attention_mask',
           'dropout', 'scaled_dot_product_attention', 'log_softmax_array', 'softmax_array']
