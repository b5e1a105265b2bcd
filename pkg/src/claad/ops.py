"""Dense-layer primitives with hand-written backward passes.

Forward functions return (output, cache); backward functions consume the
upstream gradient and the cache and return gradients for every input.
All arrays are float64 and the feature axis is always last, so the same
primitives serve [B, L, d] token tensors and [B, d] vectors.
"""

import numpy as np

LN_EPS = 1e-5


def _flat2(x):
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x, w, b):
    """y = x @ w + b with w: [n_in, n_out]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear expects {w.shape[0]} input features, got {x.shape[-1]}")
    return x @ w + b, (x, w)


def linear_bwd(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = _flat2(x).T @ _flat2(dy)
    db = _flat2(dy).sum(axis=0)
    return dx, dw, db


def layer_norm_fwd(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_bwd(dy, cache):
    xhat, inv_std, gain = cache
    dgain = (_flat2(dy) * _flat2(xhat)).sum(axis=0)
    dbias = _flat2(dy).sum(axis=0)
    dxhat = dy * gain
    # Standard layer-norm input gradient; means taken over the feature axis.
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def relu_fwd(x):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_bwd(dy, cache):
    return dy * cache


def softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dy, y, axis=-1):
    """Backward through y = softmax(x) given dL/dy."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def _split_heads(x, n_heads):
    b, length, d = x.shape
    dk = d // n_heads
    return x.reshape(b, length, n_heads, dk).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, n_heads, length, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, n_heads * dk)


def mha_fwd(q, k, v, p, n_heads):
    """Multi-head attention over [B, L, d] tensors.

    p holds wq/bq, wk/bk, wv/bv, wo/bo. Scores are scaled by 1/sqrt(d_k)
    and softmaxed per query row, so attention rows sum to 1.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError("q, k, v shapes disagree")
    qp, _ = linear_fwd(q, p["wq"], p["bq"])
    kp, _ = linear_fwd(k, p["wk"], p["bk"])
    vp, _ = linear_fwd(v, p["wv"], p["bv"])
    qh = _split_heads(qp, n_heads)
    kh = _split_heads(kp, n_heads)
    vh = _split_heads(vp, n_heads)
    scale = 1.0 / np.sqrt(d // n_heads)
    scores = qh @ kh.swapaxes(-1, -2) * scale
    attn = softmax(scores, axis=-1)
    heads = _merge_heads(attn @ vh)
    out, _ = linear_fwd(heads, p["wo"], p["bo"])
    cache = (q, k, v, qh, kh, vh, attn, heads, p, n_heads, scale)
    return out, cache


def mha_bwd(dout, cache):
    """Returns (dq, dk, dv, param-gradient dict)."""
    q, k, v, qh, kh, vh, attn, heads, p, n_heads, scale = cache
    dheads, dwo, dbo = linear_bwd(dout, (heads, p["wo"]))
    dheads = _split_heads(dheads, n_heads)
    dattn = dheads @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ dheads
    dscores = softmax_bwd(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    dq, dwq, dbq = linear_bwd(_merge_heads(dqh), (q, p["wq"]))
    dk, dwk, dbk = linear_bwd(_merge_heads(dkh), (k, p["wk"]))
    dv, dwv, dbv = linear_bwd(_merge_heads(dvh), (v, p["wv"]))
    grads = {
        "wq": dwq, "bq": dbq,
        "wk": dwk, "bk": dbk,
        "wv": dwv, "bv": dbv,
        "wo": dwo, "bo": dbo,
    }
    return dq, dk, dv, grads


def attention_weights(q, k, p, n_heads):
    """The row-stochastic attention matrices [B, H, Lq, Lk], for inspection."""
    d = q.shape[-1]
    qh = _split_heads(q @ p["wq"] + p["bq"], n_heads)
    kh = _split_heads(k @ p["wk"] + p["bk"], n_heads)
    return softmax(qh @ kh.swapaxes(-1, -2) / np.sqrt(d // n_heads), axis=-1)
