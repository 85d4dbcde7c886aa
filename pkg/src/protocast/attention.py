"""Multi-head attention encoder layers with post-residual layer norm.

One layer is ``LayerNorm(x + MHA(x))``; there is no feed-forward sublayer
by default (``use_ffn`` adds a standard 4D GELU block with its own
residual+norm).  The same layer structure serves both the per-variate
temporal encoder and the latent-space encoder.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

_NEG_INF = -1e30


def init_encoder_layer(d_model: int, rng: np.random.Generator, prefix: str,
                       use_ffn: bool = False) -> dict:
    """Bias-free q/k/v/o projections; a key bias is inert through the softmax."""
    def gauss(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    p = {
        f"{prefix}.wq": gauss(d_model, d_model),
        f"{prefix}.wk": gauss(d_model, d_model),
        f"{prefix}.wv": gauss(d_model, d_model),
        f"{prefix}.wo": gauss(d_model, d_model),
        f"{prefix}.ln_g": np.ones(d_model),
        f"{prefix}.ln_b": np.zeros(d_model),
    }
    if use_ffn:
        p.update({
            f"{prefix}.ffn_w1": gauss(d_model, 4 * d_model),
            f"{prefix}.ffn_b1": np.zeros(4 * d_model),
            f"{prefix}.ffn_w2": gauss(4 * d_model, d_model),
            f"{prefix}.ffn_b2": np.zeros(d_model),
            f"{prefix}.ln2_g": np.ones(d_model),
            f"{prefix}.ln2_b": np.zeros(d_model),
        })
    return p


def multi_head_attention(x: Tensor, params, prefix: str, heads: int,
                         key_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Bidirectional scaled dot-product attention over [B x S x D].

    ``key_mask`` is [B x S] with 1 for attendable keys; masked keys get
    -inf-like logits before the softmax.  A query row whose keys are all
    masked cannot be normalized and is rejected.
    """
    b, s, d = x.shape
    if d % heads != 0:
        raise ValidationError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=np.float64)
        if not key_mask.any(axis=-1).all():
            raise ValidationError("attention row with every key masked cannot normalize")

    def split(t):
        return t.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)

    q = split(ad.matmul(x, params[f"{prefix}.wq"]))
    k = split(ad.matmul(x, params[f"{prefix}.wk"]))
    v = split(ad.matmul(x, params[f"{prefix}.wv"]))

    logits = ad.matmul(q, k.transpose()) * (1.0 / math.sqrt(hd))
    if key_mask is not None:
        bias = np.where(key_mask > 0, 0.0, _NEG_INF)[:, None, None, :]
        logits = logits + Tensor(bias)
    weights = ad.softmax_lastdim(logits)
    ctx = ad.matmul(weights, v)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
    out = ad.matmul(merged, params[f"{prefix}.wo"])
    if return_weights:
        return out, weights.data
    return out


def encoder_layer(x: Tensor, params, prefix: str, heads: int,
                  key_mask: np.ndarray | None = None,
                  use_ffn: bool = False) -> Tensor:
    attended = multi_head_attention(x, params, prefix, heads, key_mask=key_mask)
    x = ad.layer_norm(x + attended, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    if use_ffn:
        hidden = ad.gelu(ad.matmul(x, params[f"{prefix}.ffn_w1"]) + params[f"{prefix}.ffn_b1"])
        ff = ad.matmul(hidden, params[f"{prefix}.ffn_w2"]) + params[f"{prefix}.ffn_b2"]
        x = ad.layer_norm(x + ff, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    return x


def encoder_stack(x: Tensor, params, prefix: str, layers: int, heads: int,
                  key_mask: np.ndarray | None = None,
                  use_ffn: bool = False) -> Tensor:
    """Apply ``layers`` identical encoder layers; zero layers is the identity."""
    for i in range(layers):
        x = encoder_layer(x, params, f"{prefix}.{i}", heads,
                          key_mask=key_mask, use_ffn=use_ffn)
    return x


def time_encoder_forward(h: Tensor, params, layers: int, heads: int,
                         patch_valid: np.ndarray | None = None,
                         use_ffn: bool = False) -> Tensor:
    """Encode each variate's patch sequence independently: [M x P x D] -> same.

    ``patch_valid`` masks padding-only patches out of the keys; no
    cross-variate mixing happens here.
    """
    return encoder_stack(h, params, "time", layers, heads,
                         key_mask=patch_valid, use_ffn=use_ffn)
