"""Parameter initialisers and functional layers over a flat ``name -> Tensor`` store."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


def init_linear(params, rng, name, din, dout, std=INIT_STD):
    params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (din, dout)), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dout), requires_grad=True)


def init_layer_norm(params, name, dim):
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def dense(params, name, x):
    return ad.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def norm(params, name, x):
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_mlp(params, rng, name, din, hidden, dout):
    init_linear(params, rng, f"{name}.fc1", din, hidden)
    init_linear(params, rng, f"{name}.fc2", hidden, dout)


def mlp(params, name, x):
    return dense(params, f"{name}.fc2", ad.gelu(dense(params, f"{name}.fc1", x)))


def init_block(params, rng, name, dim, mlp_dim):
    init_layer_norm(params, f"{name}.ln1", dim)
    for proj in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.attn.{proj}", dim, dim)
    init_layer_norm(params, f"{name}.ln2", dim)
    init_mlp(params, rng, f"{name}.mlp", dim, mlp_dim, dim)


def key_mask_bias(valid: np.ndarray, heads: int) -> np.ndarray:
    """Additive attention bias ``[B, heads, T, T]`` that hides padded keys."""
    b, t = valid.shape
    bias = np.where(valid, 0.0, -1e30)[:, None, None, :]
    return np.broadcast_to(bias, (b, heads, t, t)).copy()


def attention(params, name, x, heads, bias=None):
    """Multi-head self-attention over ``x[B, T, D]``; ``bias`` is added to the scores."""
    b, t, d = x.shape
    dh = d // heads

    def split(proj):
        y = ad.reshape(dense(params, f"{name}.{proj}", x), (b, t, heads, dh))
        return ad.transpose(y, (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = ad.add(scores, Tensor(bias))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return dense(params, f"{name}.o", ctx)


def block(params, name, x, heads, bias=None):
    x = ad.add(x, attention(params, f"{name}.attn", norm(params, f"{name}.ln1", x), heads, bias))
    return ad.add(x, mlp(params, f"{name}.mlp", norm(params, f"{name}.ln2", x)))


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, rows: int, cols: int, extra_slot: bool = False) -> np.ndarray:
    """Fixed 2-D sine/cosine table, row-major over the patch lattice.

    With ``extra_slot`` a zero row is prepended for a non-spatial token.
    """
    if dim % 4:
        raise ValueError("sin-cos embedding needs dim divisible by 4")
    gy, gx = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    table = np.concatenate([sincos_1d(dim // 2, gy), sincos_1d(dim // 2, gx)], axis=1)
    if extra_slot:
        table = np.concatenate([np.zeros((1, dim)), table], axis=0)
    return table


def init_lstm(params, rng, name, din, hidden, layers):
    for i in range(layers):
        src = din if i == 0 else hidden
        params[f"{name}.{i}.wx"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(src), (src, 4 * hidden)), requires_grad=True)
        params[f"{name}.{i}.wh"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 4 * hidden)), requires_grad=True)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate starts open
        params[f"{name}.{i}.b"] = Tensor(bias, requires_grad=True)


def _gate(z, k, batch, hidden):
    return ad.reshape(ad.take(z, [k], axis=1), (batch, hidden))


def lstm(params, name, seq, layers):
    """Stacked LSTM over ``seq[B, T, F]``; returns the top layer's final hidden state."""
    b, t, _ = seq.shape
    hidden = params[f"{name}.0.wh"].shape[0]
    inputs = [ad.reshape(ad.take(seq, [s], axis=1), (b, seq.shape[2])) for s in range(t)]
    for i in range(layers):
        wx, wh, bias = params[f"{name}.{i}.wx"], params[f"{name}.{i}.wh"], params[f"{name}.{i}.b"]
        h = Tensor(np.zeros((b, hidden)))
        c = Tensor(np.zeros((b, hidden)))
        outs = []
        for x in inputs:
            z = ad.reshape(ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h, wh)), bias), (b, 4, hidden))
            ig = ad.sigmoid(_gate(z, 0, b, hidden))
            fg = ad.sigmoid(_gate(z, 1, b, hidden))
            gg = ad.tanh(_gate(z, 2, b, hidden))
            og = ad.sigmoid(_gate(z, 3, b, hidden))
            c = ad.add(ad.mul(fg, c), ad.mul(ig, gg))
            h = ad.mul(og, ad.tanh(c))
            outs.append(h)
        inputs = outs
    return inputs[-1]
