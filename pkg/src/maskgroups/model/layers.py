"""Functional numpy layers with explicit backward passes.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input gradients plus a
dict of parameter gradients where applicable.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def gelu_forward(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return dy * grad


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_backward(dy, cache, g):
    xhat, inv = cache
    d = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def mlp2_forward(x, w1, b1, w2, b2):
    """Linear -> GELU -> Linear."""
    h, c1 = linear_forward(x, w1, b1)
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, w2, b2)
    return y, (c1, cg, c2)


def mlp2_backward(dy, cache, w1, w2):
    c1, cg, c2 = cache
    da, dw2, db2 = linear_backward(dy, c2, w2)
    dh = gelu_backward(da, cg)
    dx, dw1, db1 = linear_backward(dh, c1, w1)
    return dx, (dw1, db1, dw2, db2)


def attention_forward(x, p, prefix, heads, allowed):
    """Multi-head self-attention over ``x`` of shape (B, T, d).

    ``allowed`` is a (B, T, T) boolean matrix; row t lists the keys query t may
    attend to and must contain at least one True.
    """
    B, T, d = x.shape
    dh = d // heads
    q = x @ p[prefix + "wq"] + p[prefix + "bq"]
    k = x @ p[prefix + "wk"] + p[prefix + "bk"]
    v = x @ p[prefix + "wv"] + p[prefix + "bv"]
    qh = q.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / float(np.sqrt(dh))
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s = np.where(allowed[:, None], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    att = e / e.sum(axis=-1, keepdims=True)
    oh = att @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(B, T, d)
    y = o @ p[prefix + "wo"] + p[prefix + "bo"]
    return y, (x, qh, kh, vh, att, o, scale)


def attention_backward(dy, cache, p, prefix, heads):
    x, qh, kh, vh, att, o, scale = cache
    B, T, d = x.shape
    dh = d // heads
    g = {}
    do, g[prefix + "wo"], g[prefix + "bo"] = linear_backward(dy, o, p[prefix + "wo"])
    doh = do.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    datt = doh @ vh.transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ doh
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    ds *= scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, d)
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dxi, g[prefix + "w" + name], g[prefix + "b" + name] = linear_backward(dproj, x, p[prefix + "w" + name])
        dx += dxi
    return dx, g


def block_forward(x, p, prefix, heads, allowed):
    """Pre-norm transformer block: x + attn(ln1 x), then + ffn(ln2 .)."""
    a_in, c_ln1 = layernorm_forward(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    a_out, c_att = attention_forward(a_in, p, prefix + "attn.", heads, allowed)
    h = x + a_out
    f_in, c_ln2 = layernorm_forward(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    f_out, c_ffn = mlp2_forward(f_in, p[prefix + "ffn.w1"], p[prefix + "ffn.b1"], p[prefix + "ffn.w2"], p[prefix + "ffn.b2"])
    return h + f_out, (c_ln1, c_att, c_ln2, c_ffn)


def block_backward(dy, cache, p, prefix, heads):
    c_ln1, c_att, c_ln2, c_ffn = cache
    g = {}
    df_in, (g[prefix + "ffn.w1"], g[prefix + "ffn.b1"], g[prefix + "ffn.w2"], g[prefix + "ffn.b2"]) = mlp2_backward(
        dy, c_ffn, p[prefix + "ffn.w1"], p[prefix + "ffn.w2"]
    )
    dh_ln, g[prefix + "ln2.g"], g[prefix + "ln2.b"] = layernorm_backward(df_in, c_ln2, p[prefix + "ln2.g"])
    dh = dy + dh_ln
    da_in, g_att = attention_backward(dh, c_att, p, prefix + "attn.", heads)
    g.update(g_att)
    dx_ln, g[prefix + "ln1.g"], g[prefix + "ln1.b"] = layernorm_backward(da_in, c_ln1, p[prefix + "ln1.g"])
    return dh + dx_ln, g
