"""Transformer encoder with mask-self-attention and hand-written backward pass.

Blocks are post-norm: attention, residual, layer norm, GELU feed-forward,
residual, layer norm. Invisible pairs get ``-INF`` added to their logits
before scaling, so their softmax weight underflows to exactly zero.
Arrays may carry a leading batch axis; a 2-D input is treated as one sequence.
"""

from __future__ import annotations

import numpy as np

INF = 1e9
LN_EPS = 1e-12
_GELU_C = np.sqrt(2.0 / np.pi)

LAYER_KEYS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def init_layer(rng: np.random.Generator, d: int, d_ff: int, scale: float | None = None) -> dict:
    """Weights uniform in +-1/sqrt(fan_in) unless ``scale`` is given; gains 1, biases 0."""

    def u(*shape):
        s = 1.0 / np.sqrt(shape[0]) if scale is None else scale
        return rng.uniform(-s, s, size=shape)

    return {
        "wq": u(d, d), "wk": u(d, d), "wv": u(d, d), "wo": u(d, d),
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "w1": u(d, d_ff), "b1": np.zeros(d_ff),
        "w2": u(d_ff, d), "b2": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
    }


def _gelu_tanh(x):
    # tanh(u) = 1 - 2 / (exp(2u) + 1); np.exp is much faster than np.tanh here
    u = (2.0 * _GELU_C) * x * (1.0 + 0.044715 * x * x)
    with np.errstate(over="ignore"):
        return 1.0 - 2.0 / (np.exp(u) + 1.0)


def gelu(x, t=None):
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * x * (1.0 + t)


def gelu_grad(x, t=None):
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _outer_sum(a, b):
    """sum over batch and rows of a[..., i] * b[..., j]"""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def layer_norm(x, g, b):
    xc = x - x.mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))


def _as_bits(visible) -> np.ndarray:
    return np.asarray(getattr(visible, "bits", visible), dtype=bool)


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _check(h, p, bits, heads):
    if h.ndim != 3:
        raise ValueError(f"hidden state must be (batch, n, d), got shape {h.shape}")
    b, n, d = h.shape
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    if p["wq"].shape != (d, d):
        raise ValueError(f"layer width {p['wq'].shape} does not match hidden width {d}")
    if bits.shape != (b, n, n):
        raise ValueError(f"visible matrix shape {bits.shape} does not match sequence ({b}, {n}, {n})")


def layer_forward(h, p, bits, heads):
    """One block on batched input; returns output and the cache for backward."""
    _check(h, p, bits, heads)
    dh = h.shape[-1] // heads
    q, k, v = (_split(h @ p[w], heads) for w in ("wq", "wk", "wv"))
    raw = q @ k.transpose(0, 1, 3, 2)
    shift = (bits[:, None].astype(np.float64) - 1.0) * INF
    logits = (raw + shift) / np.sqrt(dh)
    logits -= logits.max(-1, keepdims=True)
    e = np.exp(logits)
    s = e / e.sum(-1, keepdims=True)
    ctx = _merge(s @ v)
    x1 = h + ctx @ p["wo"]
    h1, ln1 = layer_norm(x1, p["ln1_g"], p["ln1_b"])
    z = h1 @ p["w1"] + p["b1"]
    t = _gelu_tanh(z)
    a = gelu(z, t)
    x2 = h1 + a @ p["w2"] + p["b2"]
    out, ln2 = layer_norm(x2, p["ln2_g"], p["ln2_b"])
    cache = (h, q, k, v, s, ctx, h1, ln1, z, t, a, ln2)
    return out, cache


def layer_backward(dout, p, cache, heads):
    h, q, k, v, s, ctx, h1, ln1, z, t, a, ln2 = cache
    dh = h.shape[-1] // heads
    g = {}
    dx2, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dout, p["ln2_g"], ln2)
    g["w2"] = _outer_sum(a, dx2)
    g["b2"] = dx2.sum(axis=(0, 1))
    dz = (dx2 @ p["w2"].T) * gelu_grad(z, t)
    g["w1"] = _outer_sum(h1, dz)
    g["b1"] = dz.sum(axis=(0, 1))
    dh1 = dx2 + dz @ p["w1"].T
    dx1, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dh1, p["ln1_g"], ln1)
    g["wo"] = _outer_sum(ctx, dx1)
    dctx = _split(dx1 @ p["wo"].T, heads)
    ds = dctx @ v.transpose(0, 1, 3, 2)
    dv = s.transpose(0, 1, 3, 2) @ dctx
    draw = s * (ds - (ds * s).sum(-1, keepdims=True)) / np.sqrt(dh)
    dq = draw @ k
    dk = draw.transpose(0, 1, 3, 2) @ q
    dhid = dx1.copy()
    for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
        dproj = _merge(dproj)
        g[name] = _outer_sum(h, dproj)
        dhid += dproj @ p[name].T
    return dhid, g


def mask_attention(h, layer, visible, heads):
    """Apply one block to a single (n, d) or batched (b, n, d) input.

    Returns the block output and the post-softmax scores per head,
    shaped (heads, n, n) or (b, heads, n, n).
    """
    h = np.asarray(h, dtype=np.float64)
    bits = _as_bits(visible)
    single = h.ndim == 2
    if single:
        h, bits = h[None], bits[None]
    out, cache = layer_forward(h, layer, bits, heads)
    s = cache[4]
    return (out[0], s[0]) if single else (out, s)


class Encoder:
    """Stack of mask-self-attention blocks sharing one visible matrix."""

    def __init__(self, layers: list[dict], heads: int):
        if not layers:
            raise ValueError("encoder needs at least one layer")
        self.layers = layers
        self.heads = heads
        self._caches = None
        self._single = False

    def forward(self, x, visible, trace: bool = False):
        """Return ``(hidden, traces)``; traces is a per-layer list of score
        tensors when ``trace`` is set, else None."""
        x = np.asarray(x, dtype=np.float64)
        bits = _as_bits(visible)
        self._single = x.ndim == 2
        if self._single:
            x, bits = x[None], bits[None]
        caches, traces = [], []
        for p in self.layers:
            x, c = layer_forward(x, p, bits, self.heads)
            caches.append(c)
            if trace:
                traces.append(c[4][0] if self._single else c[4])
        self._caches = caches
        return (x[0] if self._single else x), (traces if trace else None)

    def backward(self, dout):
        """Gradients for the most recent forward: ``(d_input, [layer grads])``."""
        if self._caches is None:
            raise RuntimeError("backward called without a preceding forward")
        d = np.asarray(dout, dtype=np.float64)
        if self._single:
            d = d[None]
        grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            d, grads[i] = layer_backward(d, self.layers[i], self._caches[i], self.heads)
        return (d[0] if self._single else d), grads


def forward(x, layers, visible, heads, trace=False):
    return Encoder(layers, heads).forward(x, visible, trace)
