"""Float64 numerical primitives for the encoder, with hand-written gradients.

Every primitive operates on the last axis and broadcasts over any leading
batch axes. ``*_forward`` variants return ``(output, cache)``; the matching
``*_backward`` takes the upstream gradient and that cache.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InvalidInputError, ShapeError

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def _check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"non-finite {what}")


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_rows(x):
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def log_softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    return x - logsumexp_rows(x)[..., None]


def layer_norm_forward(x, gamma, beta, eps):
    x = np.asarray(x, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input width {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm(x, gamma, beta, eps=1e-12):
    """Population-variance layer normalisation over the last axis."""
    return layer_norm_forward(x, np.asarray(gamma, float), np.asarray(beta, float), eps)[0]


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu(x):
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt 2))."""
    return 0.5 * x * (1.0 + erf(np.asarray(x, dtype=np.float64) / SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def linear_forward(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: input width {x.shape[-1]}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def linear(x, w, b):
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    return linear_forward(x, w, b)[0]


def linear_backward(dy, cache):
    x, w = cache
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = dy2.T @ x.reshape(-1, x.shape[-1])
    db = dy2.sum(axis=0)
    return dy @ w, dw, db


def _split_heads(t, heads):
    *lead, n, d = t.shape
    return t.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(t):
    *lead, h, n, dh = t.shape
    return t.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attention_forward(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"hidden size {d} not divisible by {heads} heads")
    scale = 1.0 / math.sqrt(d // heads)
    q, cq = linear_forward(x, wq, bq)
    k, ck = linear_forward(x, wk, bk)
    v, cv = linear_forward(x, wv, bv)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    attn = softmax_rows((qh @ kh.swapaxes(-1, -2)) * scale)
    ctx = _merge_heads(attn @ vh)
    out, co = linear_forward(ctx, wo, bo)
    return out, (cq, ck, cv, co, qh, kh, vh, attn, scale, heads)


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Unmasked scaled dot-product self-attention over the second-to-last axis."""
    return attention_forward(x, wq, bq, wk, bk, wv, bv, wo, bo, heads)[0]


def attention_backward(dy, cache):
    """Returns (dx, dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo)."""
    cq, ck, cv, co, qh, kh, vh, attn, scale, heads = cache
    dctx, dwo, dbo = linear_backward(dy, co)
    dctx = _split_heads(dctx, heads)
    dattn = dctx @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    dxq, dwq, dbq = linear_backward(_merge_heads(dqh), cq)
    dxk, dwk, dbk = linear_backward(_merge_heads(dkh), ck)
    dxv, dwv, dbv = linear_backward(_merge_heads(dvh), cv)
    return dxq + dxk + dxv, dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo
