"""Numpy layers with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache. Parameters live in flat ``dict[str, ndarray]``
maps; gradients come back under the same keys.
"""

from __future__ import annotations

import numpy as np


def init_linear(rng, fan_in: int, fan_out: int, bias: bool = True, gain: float = 1.0) -> dict:
    p = {"W": rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))}
    if bias:
        p["b"] = np.zeros(fan_out)
    return p


def init_attention(rng, d_query: int, d_kv: int, d_model: int, d_out: int | None = None) -> dict:
    d_out = d_model if d_out is None else d_out
    return {
        "Wq": rng.normal(0.0, 1.0 / np.sqrt(d_query), (d_query, d_model)),
        "Wk": rng.normal(0.0, 1.0 / np.sqrt(d_kv), (d_kv, d_model)),
        "Wv": rng.normal(0.0, 1.0 / np.sqrt(d_kv), (d_kv, d_model)),
        "Wo": rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_out)),
        "bo": np.zeros(d_out),
    }


def prefixed(prefix: str, p: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in p.items()}


def sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def accumulate(into: dict, prefix: str, grads: dict) -> None:
    for k, g in grads.items():
        key = f"{prefix}.{k}" if prefix else k
        if key in into:
            into[key] = into[key] + g
        else:
            into[key] = g


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def linear_fwd(x, W, b=None):
    y = x @ W
    if b is not None:
        y = y + b
    return y


def linear_bwd(dy, x, W, bias: bool = True):
    dW = _flat2(x).T @ _flat2(dy)
    dx = dy @ W.T
    if bias:
        return dx, dW, _flat2(dy).sum(axis=0)
    return dx, dW


def tanh_bwd(dy, y):
    return dy * (1.0 - y * y)


def softmax(s, axis: int = -1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis: int = -1):
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _split(x, heads):
    *lead, L, M = x.shape
    return x.reshape(*lead, L, heads, M // heads).swapaxes(-2, -3)


def _merge(x):
    *lead, h, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, h * dh)


def attention_fwd(xq, xkv, p: dict, heads: int, scaled: bool = True):
    """Multi-head attention ``softmax(Q K^T [/sqrt(d_head)]) V`` followed by an output map.

    Leading dimensions of ``xq`` and ``xkv`` broadcast against each other.
    Returns ``(y, cache)``; ``cache["attn"]`` holds the weights (..., h, Lq, Lk).
    """
    q = _split(xq @ p["Wq"], heads)
    k = _split(xkv @ p["Wk"], heads)
    v = _split(xkv @ p["Wv"], heads)
    scale = 1.0 / np.sqrt(q.shape[-1]) if scaled else 1.0
    a = softmax((q @ k.swapaxes(-1, -2)) * scale)
    o = _merge(a @ v)
    y = o @ p["Wo"] + p["bo"]
    cache = {"xq": xq, "xkv": xkv, "q": q, "k": k, "v": v, "attn": a, "o": o, "scale": scale,
             "heads": heads, "p": p}
    return y, cache


def attention_bwd(dy, cache):
    p, heads = cache["p"], cache["heads"]
    q, k, v, a, o = cache["q"], cache["k"], cache["v"], cache["attn"], cache["o"]
    xq, xkv = cache["xq"], cache["xkv"]
    grads = {"Wo": _flat2(o).T @ _flat2(dy), "bo": _flat2(dy).sum(axis=0)}
    do = _split(dy @ p["Wo"].T, heads)
    da = do @ v.swapaxes(-1, -2)
    dv = unbroadcast(a.swapaxes(-1, -2) @ do, v.shape)
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * cache["scale"]
    dq = unbroadcast(ds @ k, q.shape)
    dk = unbroadcast(ds.swapaxes(-1, -2) @ q, k.shape)
    dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
    grads["Wq"] = _flat2(xq).T @ _flat2(dq)
    grads["Wk"] = _flat2(xkv).T @ _flat2(dk)
    grads["Wv"] = _flat2(xkv).T @ _flat2(dv)
    dxq = dq @ p["Wq"].T
    dxkv = dk @ p["Wk"].T + dv @ p["Wv"].T
    return dxq, dxkv, grads


def ffn_fwd(x, p: dict):
    h = np.tanh(x @ p["W1"] + p["b1"])
    return h @ p["W2"] + p["b2"], (x, h, p)


def ffn_bwd(dy, cache):
    x, h, p = cache
    dh, dW2, db2 = linear_bwd(dy, h, p["W2"])
    dpre = tanh_bwd(dh, h)
    dx, dW1, db1 = linear_bwd(dpre, x, p["W1"])
    return dx, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def init_ffn(rng, d_in: int, d_hidden: int, d_out: int) -> dict:
    l1, l2 = init_linear(rng, d_in, d_hidden), init_linear(rng, d_hidden, d_out)
    return {"W1": l1["W"], "b1": l1["b"], "W2": l2["W"], "b2": l2["b"]}


def cosine_fwd(h, c):
    """Cosine similarity along the last axis; ``c`` broadcasts against ``h``."""
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    cn = np.linalg.norm(c, axis=-1, keepdims=True)
    dot = (h * c).sum(-1, keepdims=True)
    cos = dot / (hn * cn)
    return cos[..., 0], (h, c, hn, cn, cos)


def cosine_bwd_h(dcos, cache):
    h, c, hn, cn, cos = cache
    dcos = dcos[..., None]
    return dcos * (c / (hn * cn) - cos * h / (hn * hn))
