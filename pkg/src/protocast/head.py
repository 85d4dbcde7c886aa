"""Quantile projection over horizon patches, pinball loss, joint objective."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .prototypes import orthogonality_loss


def validate_quantiles(quantiles) -> tuple:
    qs = tuple(float(q) for q in quantiles)
    if not qs or any(not (0.0 < q < 1.0) for q in qs):
        raise ValidationError(f"quantiles must lie in the open unit interval: {qs}")
    if any(b >= a for a, b in zip(qs[1:], qs)):
        raise ValidationError(f"quantiles must be strictly increasing: {qs}")
    return qs


def init_head_params(d_model: int, patch_len: int, n_quantiles: int,
                     rng: np.random.Generator) -> dict:
    out = patch_len * n_quantiles
    return {
        "head.w": rng.normal(0.0, 1.0 / math.sqrt(d_model), size=(d_model, out)),
        "head.b": np.zeros(out),
    }


def quantile_head(h: Tensor, horizon_patches: int, params,
                  patch_len: int, n_quantiles: int) -> Tensor:
    """Project the last ``horizon_patches`` embeddings to per-step quantiles.

    [M x P x D] -> [M x T x |Q|] with T = horizon_patches * patch_len.
    """
    m, p, _ = h.shape
    if horizon_patches > p:
        raise ValidationError(
            f"horizon of {horizon_patches} patches exceeds the {p} available"
        )
    future = h[:, p - horizon_patches:, :]
    proj = ad.matmul(future, params["head.w"]) + params["head.b"]
    return proj.reshape(m, horizon_patches * patch_len, n_quantiles)


def pinball(quantile: float, error: Tensor) -> Tensor:
    """max(q * e, (q - 1) * e) for e = target - prediction, elementwise."""
    return ad.where(error.data >= 0, error * quantile, error * (quantile - 1.0))


def quantile_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray,
                  quantiles) -> Tensor:
    """Mean pinball loss over valid cells only.

    ``pred`` is [M x T x |Q|]; padded/missing target cells contribute to
    neither numerator nor denominator.
    """
    quantiles = validate_quantiles(quantiles)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=np.float64)
    n_valid = valid.sum()
    if n_valid == 0:
        raise ValidationError("quantile loss needs at least one valid target cell")
    if pred.shape[2] != len(quantiles):
        raise ValidationError(
            f"prediction has {pred.shape[2]} quantile tracks for {len(quantiles)} quantiles"
        )
    q_row = np.asarray(quantiles)[None, None, :]
    err = Tensor(np.where(valid[:, :, None] > 0, target[:, :, None], 0.0)) - pred
    cells = ad.where(err.data >= 0, err * Tensor(q_row), err * Tensor(q_row - 1.0))
    masked = cells * Tensor(valid[:, :, None])
    return masked.sum() * (1.0 / (len(quantiles) * n_valid))


def total_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray,
               quantiles, params, alpha: float):
    """Joint objective: prediction loss plus alpha * prototype orthogonality."""
    if alpha < 0:
        raise ValidationError(f"alpha must be non-negative, got {alpha}")
    l_pred = quantile_loss(pred, target, valid_mask, quantiles)
    l_orth = orthogonality_loss(params)
    return l_pred + alpha * l_orth, l_pred, l_orth


def sort_quantile_tracks(pred: np.ndarray) -> np.ndarray:
    """Non-crossing repair: sort each (variate, step) across the quantile axis."""
    return np.sort(pred, axis=-1)
