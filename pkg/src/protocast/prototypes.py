"""Latent prototype space: differential projection, global interaction, routing.

Heterogeneous variates are projected onto a bank of C shared prototypes
with a differential attention score — a positive softmax map minus a
learnable multiple of a negative one — so both synergistic and
antagonistic affinities are expressible.  All entities' prototype tokens
then interact globally (the only cross-entity pathway), and a
request-and-dispatch router reassembles per-variate representations,
fused back into the temporal stream through a sigmoid gate.

Every stage runs as one batched pass over an entity-padded block
[N x m_max x P x D]; padded variate slots are excluded by masking, never
by per-entity loops.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import encoder_stack
from .errors import ValidationError
from .preprocess import EntityLayout

COSINE_EPS = 1e-24


def init_prototype_params(d_model: int, prototypes: int, lambda_init: float,
                          rng: np.random.Generator) -> dict:
    """Prototype banks (std 1/sqrt(D) keeps initial logits order-1) and projections."""
    std = 1.0 / math.sqrt(d_model)
    def gauss(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    return {
        "proto.k_pos": rng.normal(0.0, std, size=(prototypes, d_model)),
        "proto.k_neg": rng.normal(0.0, std, size=(prototypes, d_model)),
        "proto.lam": np.asarray(lambda_init, dtype=np.float64),
        "upda.q_w": gauss(d_model, d_model),
        "upda.v_w": gauss(d_model, d_model),
    }


def init_router_params(d_model: int, rng: np.random.Generator) -> dict:
    """Weight-only routing projections; only the gate carries a bias."""
    def gauss(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
    return {
        "vrr.req_w": gauss(d_model, d_model),
        "vrr.idx_w": gauss(d_model, d_model),
        "vrr.ctx_w": gauss(d_model, d_model),
        "gate.w": gauss(d_model, d_model),
        "gate.b": np.zeros(d_model),
    }


def pad_by_entity(h: Tensor, layout: EntityLayout):
    """[M x P x D] -> ([N x m_max x P x D], slot mask [N x m_max]).

    Padded slots replicate row 0 and are zeroed by the mask wherever they
    feed an aggregation.
    """
    idx, mask = layout.padded_index()
    n, m_max = idx.shape
    gathered = ad.take(h, idx.reshape(-1))
    _, p, d = h.shape
    return gathered.reshape(n, m_max, p, d), mask


def rows_from_padded(h_padded: Tensor, layout: EntityLayout) -> Tensor:
    """Inverse of :func:`pad_by_entity`: collect the real rows back in order."""
    ent, slot, m_max = layout.flat_rows()
    n = layout.entity_count
    _, _, p, d = h_padded.shape
    flat = h_padded.reshape(n * m_max, p, d)
    return ad.take(flat, ent * m_max + slot)


def upda_forward(h_t: Tensor, layout: EntityLayout, params,
                 scale_dim: int | None = None):
    """Differential projection of variates onto the shared prototype bank.

    For each entity and patch the positive and negative softmax maps are
    combined as (A_pos - lam * A_neg) and transposed onto the value
    features, pooling the entity's variates into C prototype tokens:
    returns [N x C x P x D].  Padded variate slots contribute nothing.
    """
    k_pos, k_neg, lam = params["proto.k_pos"], params["proto.k_neg"], params["proto.lam"]
    d = h_t.shape[-1]
    scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d)
    hp, mask = pad_by_entity(h_t, layout)  # [N, m, P, D]
    q = ad.matmul(hp, params["upda.q_w"])
    v = ad.matmul(hp, params["upda.v_w"])
    a_pos = ad.softmax_lastdim(ad.matmul(q, k_pos.transpose()) * scale)  # [N,m,P,C]
    a_neg = ad.softmax_lastdim(ad.matmul(q, k_neg.transpose()) * scale)
    diff = (a_pos - lam * a_neg) * Tensor(mask[:, :, None, None])
    # transpose-sum over variates: [N,P,C,m] @ [N,P,m,D] -> [N,P,C,D]
    pooled = ad.matmul(diff.transpose(0, 2, 3, 1), v.transpose(0, 2, 1, 3))
    return pooled.transpose(0, 2, 1, 3)  # [N, C, P, D]


def orthogonality_loss(params) -> Tensor:
    """Mean absolute cosine over every (positive row, negative row) pair; in [0, 1]."""
    k_pos, k_neg = params["proto.k_pos"], params["proto.k_neg"]
    def unit_rows(k):
        norm = ((k * k).sum(axis=1, keepdims=True) + COSINE_EPS).sqrt()
        return k / norm
    cos = ad.matmul(unit_rows(k_pos), unit_rows(k_neg).transpose())
    return cos.abs().mean()


def lea_forward(h_c: Tensor, params, layers: int, heads: int,
                use_ffn: bool = False) -> Tensor:
    """Global interaction over all N*C prototype tokens, per patch position.

    The combined entity-and-prototype axis is the spatial sequence; the
    patch axis is the batch.  This is where cross-entity transfer happens.
    """
    n, c, p, d = h_c.shape
    seq = h_c.transpose(2, 0, 1, 3).reshape(p, n * c, d)
    seq = encoder_stack(seq, params, "lea", layers, heads, use_ffn=use_ffn)
    return seq.reshape(p, n, c, d).transpose(1, 2, 0, 3)


def vrr_route(h_t: Tensor, h_c_ref: Tensor, layout: EntityLayout, params,
              scale_dim: int | None = None,
              return_weights: bool = False):
    """Request-and-dispatch soft routing from prototypes back to variates.

    Requests come from the temporal stream, index and context from the
    refined prototype tokens; each variate's routing softmax ranges only
    over its own entity's C prototypes.  Returns [M x P x D] rows in
    original order (padded slots are dropped).
    """
    d = h_t.shape[-1]
    scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d)
    hp, _ = pad_by_entity(h_t, layout)  # [N, m, P, D]
    req = ad.matmul(hp, params["vrr.req_w"])
    idx = ad.matmul(h_c_ref, params["vrr.idx_w"])  # [N,C,P,D]
    ctx = ad.matmul(h_c_ref, params["vrr.ctx_w"])
    # [N,P,m,D] @ [N,P,D,C] -> routing logits [N,P,m,C]
    logits = ad.matmul(req.transpose(0, 2, 1, 3), idx.transpose(0, 2, 3, 1)) * scale
    weights = ad.softmax_lastdim(logits)
    routed = ad.matmul(weights, ctx.transpose(0, 2, 1, 3))  # [N,P,m,D]
    out = rows_from_padded(routed.transpose(0, 2, 1, 3), layout)
    if return_weights:
        return out, weights.data
    return out


def gated_fuse(h_t: Tensor, h_v: Tensor, params) -> Tensor:
    """Gated residual fusion: h_t + sigmoid(Linear(h_t)) * h_v."""
    gate = ad.sigmoid(ad.matmul(h_t, params["gate.w"]) + params["gate.b"])
    return h_t + gate * h_v


def variate_attention_forward(h_t: Tensor, layout: EntityLayout, params,
                              latent_layers: int, heads: int,
                              use_ffn: bool = False) -> Tensor:
    """UPDA -> LEA -> VRR -> gate; [M x P x D] in, [M x P x D] out."""
    h_c = upda_forward(h_t, layout, params)
    h_c = lea_forward(h_c, params, latent_layers, heads, use_ffn=use_ffn)
    h_v = vrr_route(h_t, h_c, layout, params)
    return gated_fuse(h_t, h_v, params)
