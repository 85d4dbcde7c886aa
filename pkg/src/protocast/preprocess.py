"""Raw series -> normalized, masked, patch-embedded model inputs, and back.

Normalization is instance-wise per variate: a z-score from statistics over
observed entries only, compressed through an invertible map ``g``.  The
default ``g`` is the inverse hyperbolic sine; a literal clamped-arcsine
mode exists for fidelity experiments.  De-normalization applies the exact
inverse, so round trips are lossless on observed entries.

Each time step carries three channels (value, relative timestamp,
observation mask).  The channel-interleaved sequence is cut into
non-overlapping patches of ``patch_len`` steps and embedded through a
residual patch embedding: a plain linear projection plus a one-hidden-layer
GELU MLP, summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

SIGMA_FLOOR = 1e-8


@dataclass
class EntitySeries:
    """One multivariate entity: [variates x time] values, NaN = missing."""

    entity_id: str
    values: np.ndarray
    frequency_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValidationError(
                f"entity {self.entity_id!r}: values must be [variates x time], "
                f"got shape {self.values.shape}"
            )

    @property
    def variate_count(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class InstanceStats:
    """Per-variate mean and floored standard deviation over observed values."""

    mu: np.ndarray
    sigma: np.ndarray


def _compress(z: np.ndarray, mode: str) -> np.ndarray:
    if mode == "asinh":
        return np.arcsinh(z)
    if mode == "arcsin":
        return np.arcsin(np.clip(z, -1.0, 1.0))
    raise ValidationError(f"unknown normalization mode {mode!r}")


def _decompress(y: np.ndarray, mode: str) -> np.ndarray:
    if mode == "asinh":
        return np.sinh(y)
    if mode == "arcsin":
        return np.sin(y)
    raise ValidationError(f"unknown normalization mode {mode!r}")


def normalize_instance(values, stats: InstanceStats | None = None,
                       mode: str = "asinh", label: str = "series"):
    """Normalize one variate (1-D) or a variate stack (2-D row-wise).

    Statistics are the population mean/std of the observed (finite) entries
    only; missing entries stay NaN in the output.  Pass ``stats`` to reuse
    statistics computed earlier (e.g. at context-preparation time).
    """
    x = np.asarray(values, dtype=np.float64)
    squeeze = x.ndim == 1
    rows = x[None, :] if squeeze else x
    if stats is None:
        obs = np.isfinite(rows)
        counts = obs.sum(axis=1)
        bad = np.nonzero(counts == 0)[0]
        if bad.size:
            raise ValidationError(f"{label}: variate {bad[0]} has no observed values")
        filled = np.where(obs, rows, 0.0)
        mu = filled.sum(axis=1) / counts
        var = (np.where(obs, (rows - mu[:, None]) ** 2, 0.0)).sum(axis=1) / counts
        sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
        stats = InstanceStats(mu=mu, sigma=sigma)
    z = (rows - stats.mu[:, None]) / stats.sigma[:, None]
    out = np.where(np.isfinite(rows), _compress(z, mode), np.nan)
    return (out[0] if squeeze else out), stats


def denormalize_forecast(y_norm, stats: InstanceStats, mode: str = "asinh"):
    """Invert the compressive map and the z-score: sigma * g^-1(y) + mu.

    ``y_norm`` may be [T], [V x T] or [V x T x Q]; stats broadcast over the
    trailing axes.
    """
    y = np.asarray(y_norm, dtype=np.float64)
    mu, sigma = stats.mu, stats.sigma
    if y.ndim >= 2:
        extra = (1,) * (y.ndim - 1)
        mu = mu.reshape((-1,) + extra)
        sigma = sigma.reshape((-1,) + extra)
    else:
        mu = float(mu[0]) if np.ndim(mu) else float(mu)
        sigma = float(sigma[0]) if np.ndim(sigma) else float(sigma)
    return sigma * _decompress(y, mode) + mu


def build_timestamps(context_len: int, horizon: int) -> np.ndarray:
    """Normalized sequential ordering anchored at 0 for the first forecast step.

    Arithmetic sequence with step 1/(L+T): index L holds 0.
    """
    if context_len < 0 or horizon < 1:
        raise ValidationError(
            f"need context_len >= 0 and horizon >= 1, got {context_len}, {horizon}"
        )
    total = context_len + horizon
    return np.arange(-context_len, horizon, dtype=np.float64) / total


def extended_timestamps(real_context: int, real_horizon: int,
                        padded_context: int, padded_horizon: int) -> np.ndarray:
    """Timestamp grid for a padded sample.

    The step stays 1/(L_i + T_i) of the sample's real window and the zero
    anchor stays at the first forecast step, so the values on the real span
    are unchanged by padding; padded positions continue the sequence.
    """
    idx = np.arange(-padded_context, padded_horizon, dtype=np.float64)
    return idx / (real_context + real_horizon)


@dataclass
class EntityLayout:
    """Entity membership of the batch rows, in row order.

    ``counts[i]`` is entity i's variate count; ``row_valid`` is False for
    rows that are pure padding (they are excluded from prototype
    aggregation, routing output and loss).
    """

    counts: list
    row_valid: np.ndarray

    def __post_init__(self):
        self.row_valid = np.asarray(self.row_valid, dtype=bool)
        if int(sum(self.counts)) != self.row_valid.shape[0]:
            raise ValidationError(
                f"layout covers {sum(self.counts)} rows but row_valid has "
                f"{self.row_valid.shape[0]}"
            )

    @property
    def entity_count(self) -> int:
        return len(self.counts)

    @property
    def total_rows(self) -> int:
        return int(sum(self.counts))

    def padded_index(self):
        """(index [N x m_max], mask [N x m_max]) mapping rows into a padded block.

        Slots beyond an entity's variate count point at row 0 and are
        masked out; padded-variate rows are masked too.
        """
        m_max = max(self.counts)
        n = len(self.counts)
        idx = np.zeros((n, m_max), dtype=np.intp)
        mask = np.zeros((n, m_max), dtype=np.float64)
        start = 0
        for i, m in enumerate(self.counts):
            idx[i, :m] = np.arange(start, start + m)
            mask[i, :m] = self.row_valid[start:start + m]
            start += m
        if not mask.any(axis=1).all():
            empty = int(np.nonzero(~mask.any(axis=1))[0][0])
            raise ValidationError(f"entity {empty} has zero unpadded variates")
        return idx, mask

    def flat_rows(self):
        """Row-major (entity, slot) pairs selecting real rows from the padded block."""
        m_max = max(self.counts)
        ent, slot = [], []
        for i, m in enumerate(self.counts):
            ent.extend([i] * m)
            slot.extend(range(m))
        return np.asarray(ent, dtype=np.intp), np.asarray(slot, dtype=np.intp), m_max


@dataclass
class PreparedBatch:
    """Normalized, padded, masked model inputs plus training targets.

    Shapes: x_norm/timestamps/obs_mask are [M x S] with S the padded
    context plus padded horizon; patch_valid is [M x P] and marks patches
    overlapping each sample's real span (padding-only patches are masked
    out of temporal attention keys).
    """

    x_norm: np.ndarray
    timestamps: np.ndarray
    obs_mask: np.ndarray
    patch_valid: np.ndarray
    layout: EntityLayout
    stats: InstanceStats
    patch_len: int
    horizon: int               # padded horizon length (multiple of patch_len)
    target_norm: np.ndarray | None = None
    target_valid: np.ndarray | None = None
    sample_refs: list = field(default_factory=list)

    @property
    def patch_count(self) -> int:
        return self.x_norm.shape[1] // self.patch_len

    @property
    def horizon_patches(self) -> int:
        return self.horizon // self.patch_len

    @property
    def rows(self) -> int:
        return self.x_norm.shape[0]


def build_model_input(context: np.ndarray, horizon: int, patch_len: int,
                      mode: str = "asinh", stats: InstanceStats | None = None,
                      entity_id: str = "entity") -> PreparedBatch:
    """Prepare one window: [variates x L] history plus T placeholder steps.

    The value channel holds the normalized history with missing entries
    zero-filled; future steps are placeholder tokens (value 0, mask 0).
    (L + T) must divide into whole patches.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 1:
        context = context[None, :]
    v, L = context.shape
    total = L + horizon
    if total % patch_len != 0:
        raise ValidationError(
            f"window length {L} + horizon {horizon} is not a multiple of "
            f"patch_len {patch_len}; the sampler must align lengths"
        )
    norm, stats = normalize_instance(context, stats=stats, mode=mode, label=entity_id)
    obs_hist = np.isfinite(context).astype(np.float64)
    x = np.zeros((v, total))
    x[:, :L] = np.where(np.isfinite(norm), norm, 0.0)
    obs = np.zeros((v, total))
    obs[:, :L] = obs_hist
    ts = np.tile(build_timestamps(L, horizon), (v, 1))
    patch_valid = np.ones((v, total // patch_len))
    layout = EntityLayout(counts=[v], row_valid=np.ones(v, dtype=bool))
    return PreparedBatch(
        x_norm=x, timestamps=ts, obs_mask=obs, patch_valid=patch_valid,
        layout=layout, stats=stats, patch_len=patch_len, horizon=horizon,
        sample_refs=[entity_id],
    )


def interleave_patches(batch: PreparedBatch) -> np.ndarray:
    """[M x P x 3*patch_len] with (value, timestamp, mask) per step, in step order."""
    m, s = batch.x_norm.shape
    stacked = np.stack([batch.x_norm, batch.timestamps, batch.obs_mask], axis=-1)
    p = s // batch.patch_len
    return stacked.reshape(m, p, 3 * batch.patch_len)


def init_embed_params(d_model: int, patch_len: int, rng: np.random.Generator,
                      prefix: str = "embed") -> dict:
    """Residual patch-embedding parameters for a 3-channel patch of width 3*L_p."""
    width = 3 * patch_len
    def gauss(*shape, fan):
        return rng.normal(0.0, 1.0 / np.sqrt(fan), size=shape)
    return {
        f"{prefix}.w_lin": gauss(width, d_model, fan=width),
        f"{prefix}.b_lin": np.zeros(d_model),
        f"{prefix}.w_mlp1": gauss(width, d_model, fan=width),
        f"{prefix}.b_mlp1": np.zeros(d_model),
        f"{prefix}.w_mlp2": gauss(d_model, d_model, fan=d_model),
        f"{prefix}.b_mlp2": np.zeros(d_model),
    }


def res_patch_embed(batch: PreparedBatch, params, prefix: str = "embed") -> Tensor:
    """Embed patches through the linear branch plus the GELU MLP branch.

    The linear branch carries the patch's linear structure; the MLP branch
    adds the non-linear part.  Returns [M x P x D].
    """
    patches = Tensor(interleave_patches(batch))
    lin = ad.matmul(patches, params[f"{prefix}.w_lin"]) + params[f"{prefix}.b_lin"]
    hidden = ad.gelu(ad.matmul(patches, params[f"{prefix}.w_mlp1"]) + params[f"{prefix}.b_mlp1"])
    mlp = ad.matmul(hidden, params[f"{prefix}.w_mlp2"]) + params[f"{prefix}.b_mlp2"]
    return lin + mlp
