"""Forward/backward primitives for the numpy Transformer.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input gradients plus a
dict of parameter gradients keyed like the parameters.
"""

import numpy as np

NEG_INF = -1e9
LN_EPS = 1e-6


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x):
    """x * sigmoid(x), beta fixed at 1."""
    x = np.asarray(x)
    if x.ndim == 0:
        return x * sigmoid(x.reshape(1))[0]
    return x * sigmoid(x)


def swish_grad(x):
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sinusoidal_positions(n_positions, d_model, dtype=np.float64):
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def _sum_leading(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(dy, x, w):
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return dx, dw, _sum_leading(dy)


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return xhat * g + b, (xhat, inv_std, g)


def layer_norm_backward(dy, cache):
    xhat, inv_std, g = cache
    dg = _sum_leading(dy * xhat)
    db = _sum_leading(dy)
    dxhat = dy * g
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def dropout_forward(x, rate, rng):
    if rng is None or rate <= 0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def _split_heads(x, heads):
    B, T, D = x.shape
    return x.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention_forward(p, prefix, xq, xkv, mask, heads):
    """Multi-head attention. ``mask`` is additive, broadcastable to (B,H,Tq,Tk)."""
    wq, bq = p[prefix + "wq"], p[prefix + "bq"]
    wk, bk = p[prefix + "wk"], p[prefix + "bk"]
    wv, bv = p[prefix + "wv"], p[prefix + "bv"]
    wo, bo = p[prefix + "wo"], p[prefix + "bo"]
    q = _split_heads(linear_forward(xq, wq, bq), heads)
    k = _split_heads(linear_forward(xkv, wk, bk), heads)
    v = _split_heads(linear_forward(xkv, wv, bv), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        scores = scores + mask
    a = softmax(scores)
    ctx = _merge_heads(a @ v)
    out = linear_forward(ctx, wo, bo)
    return out, (xq, xkv, q, k, v, a, ctx, scale)


def attention_backward(dout, cache, p, prefix, heads):
    """Returns ``(dxq, dxkv, grads)``."""
    xq, xkv, q, k, v, a, ctx, scale = cache
    grads = {}
    dctx, grads[prefix + "wo"], grads[prefix + "bo"] = linear_backward(dout, ctx, p[prefix + "wo"])
    dctx = _split_heads(dctx, heads)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dxq, grads[prefix + "wq"], grads[prefix + "bq"] = linear_backward(
        _merge_heads(dq), xq, p[prefix + "wq"]
    )
    dxk, grads[prefix + "wk"], grads[prefix + "bk"] = linear_backward(
        _merge_heads(dk), xkv, p[prefix + "wk"]
    )
    dxv, grads[prefix + "wv"], grads[prefix + "bv"] = linear_backward(
        _merge_heads(dv), xkv, p[prefix + "wv"]
    )
    return dxq, dxk + dxv, grads


def ffn_forward(p, prefix, x):
    h = linear_forward(x, p[prefix + "w1"], p[prefix + "b1"])
    s = swish(h)
    return linear_forward(s, p[prefix + "w2"], p[prefix + "b2"]), (x, h, s)


def ffn_backward(dy, cache, p, prefix):
    x, h, s = cache
    grads = {}
    ds, grads[prefix + "w2"], grads[prefix + "b2"] = linear_backward(dy, s, p[prefix + "w2"])
    dh = ds * swish_grad(h)
    dx, grads[prefix + "w1"], grads[prefix + "b1"] = linear_backward(dh, x, p[prefix + "w1"])
    return dx, grads
