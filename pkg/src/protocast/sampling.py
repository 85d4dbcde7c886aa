"""Window sampling, variate permutation/capping, and variate-budget batching.

Context lengths and horizons are drawn per sample (horizons in whole
patches), variate order is shuffled and capped, and samples accumulate
into a batch until the next one would exceed the variate budget; that
sample carries over, so nothing is dropped.  Contexts are left-padded
with missing markers to the batch maximum, targets right-padded to the
configured horizon with loss-mask zeros.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import ValidationError
from .preprocess import (
    EntityLayout,
    EntitySeries,
    InstanceStats,
    PreparedBatch,
    extended_timestamps,
    normalize_instance,
)

log = logging.getLogger(__name__)


@dataclass
class WindowSample:
    """One training window cut from an entity, with its variate selection."""

    entity_id: str
    window_start: int
    context: np.ndarray        # [v x L_i], raw scale, NaN = missing
    target: np.ndarray         # [v x T_i]
    variate_indices: np.ndarray

    @property
    def context_len(self) -> int:
        return self.context.shape[1]

    @property
    def horizon(self) -> int:
        return self.target.shape[1]

    @property
    def variate_count(self) -> int:
        return self.context.shape[0]

    def ref(self) -> dict:
        return {
            "entity": self.entity_id,
            "start": int(self.window_start),
            "context_len": int(self.context_len),
            "horizon": int(self.horizon),
            "variates": [int(i) for i in self.variate_indices],
        }


def sample_window(entity: EntitySeries, rng: np.random.Generator,
                  cfg: Config) -> WindowSample | None:
    """Draw (L_i, T_i, start) uniformly; None if the entity is too short."""
    length = entity.length
    if length < cfg.l_min + cfg.patch_len:
        log.debug("skipping %s: length %d below minimum window %d",
                  entity.entity_id, length, cfg.l_min + cfg.patch_len)
        return None
    t_hi = min(cfg.t_max, length - cfg.l_min)
    t_choices = np.arange(cfg.patch_len, t_hi + 1, cfg.patch_len)
    horizon = int(rng.choice(t_choices))
    l_hi = min(cfg.l_cap, length - horizon)
    context_len = int(rng.integers(cfg.l_min, l_hi + 1))
    start = int(rng.integers(0, length - context_len - horizon + 1))
    window = entity.values[:, start:start + context_len + horizon]
    return WindowSample(
        entity_id=entity.entity_id,
        window_start=start,
        context=window[:, :context_len],
        target=window[:, context_len:],
        variate_indices=np.arange(entity.variate_count),
    )


def permute_and_cap(sample: WindowSample, rng: np.random.Generator,
                    m_max: int) -> WindowSample:
    """Shuffle variate order, drop variates unobserved in the window, cap at m_max."""
    if m_max < 1:
        raise ValidationError(f"m_max must be >= 1, got {m_max}")
    perm = rng.permutation(sample.variate_count)
    observed = np.isfinite(sample.context).any(axis=1)
    keep = [i for i in perm if observed[i]]
    if not keep:
        raise ValidationError(
            f"sample from {sample.entity_id!r} at {sample.window_start} has no "
            "variate with observed values"
        )
    keep = np.asarray(keep[:m_max], dtype=np.intp)
    return WindowSample(
        entity_id=sample.entity_id,
        window_start=sample.window_start,
        context=sample.context[keep],
        target=sample.target[keep],
        variate_indices=sample.variate_indices[keep],
    )


@dataclass
class AssembledBatch:
    samples: list
    l_max: int
    total_variates: int
    prepared: PreparedBatch


def _aligned_l_max(samples, cfg: Config, pad_to: int = 0) -> int:
    l_max = max(max(s.context_len for s in samples), pad_to)
    rem = (l_max + cfg.t_max) % cfg.patch_len
    return l_max + ((cfg.patch_len - rem) % cfg.patch_len)


def assemble_batch(samples: list, cfg: Config, pad_to: int = 0) -> AssembledBatch:
    """Pad and normalize a list of window samples into one model batch.

    ``pad_to`` forces a wider context padding than the batch needs; model
    outputs are invariant to it.
    """
    if not samples:
        raise ValidationError("cannot assemble an empty batch")
    total = sum(s.variate_count for s in samples)
    if total > cfg.variate_budget:
        raise ValidationError(
            f"batch of {total} variates exceeds budget {cfg.variate_budget}"
        )
    l_max = _aligned_l_max(samples, cfg, pad_to)
    s_total = l_max + cfg.t_max
    p_total = s_total // cfg.patch_len

    x_rows, ts_rows, obs_rows, pv_rows = [], [], [], []
    tgt_rows, tv_rows, mus, sigmas = [], [], [], []
    counts, refs = [], []
    for s in samples:
        v = s.variate_count
        ctx = np.full((v, l_max), np.nan)
        ctx[:, l_max - s.context_len:] = s.context
        tgt = np.full((v, cfg.t_max), np.nan)
        tgt[:, :s.horizon] = s.target

        norm_ctx, stats = normalize_instance(ctx, mode=cfg.normalization,
                                             label=s.entity_id)
        x = np.zeros((v, s_total))
        x[:, :l_max] = np.where(np.isfinite(norm_ctx), norm_ctx, 0.0)
        obs = np.zeros((v, s_total))
        obs[:, :l_max] = np.isfinite(ctx)

        norm_tgt, _ = normalize_instance(tgt, stats=stats, mode=cfg.normalization)
        tgt_rows.append(np.where(np.isfinite(norm_tgt), norm_tgt, 0.0))
        tv_rows.append(np.isfinite(tgt).astype(np.float64))

        ts = extended_timestamps(s.context_len, s.horizon, l_max, cfg.t_max)
        ts_rows.append(np.tile(ts, (v, 1)))

        pad = l_max - s.context_len
        patch_ends = (np.arange(p_total) + 1) * cfg.patch_len
        pv = (patch_ends > pad).astype(np.float64)
        pv_rows.append(np.tile(pv, (v, 1)))

        x_rows.append(x)
        obs_rows.append(obs)
        mus.append(stats.mu)
        sigmas.append(stats.sigma)
        counts.append(v)
        refs.append(s.ref())

    rows = sum(counts)
    prepared = PreparedBatch(
        x_norm=np.concatenate(x_rows),
        timestamps=np.concatenate(ts_rows),
        obs_mask=np.concatenate(obs_rows),
        patch_valid=np.concatenate(pv_rows),
        layout=EntityLayout(counts=counts, row_valid=np.ones(rows, dtype=bool)),
        stats=InstanceStats(mu=np.concatenate(mus), sigma=np.concatenate(sigmas)),
        patch_len=cfg.patch_len,
        horizon=cfg.t_max,
        target_norm=np.concatenate(tgt_rows),
        target_valid=np.concatenate(tv_rows),
        sample_refs=refs,
    )
    return AssembledBatch(samples=list(samples), l_max=l_max,
                          total_variates=total, prepared=prepared)


def batch_stream(sample_iter, cfg: Config):
    """Greedy accumulation under the variate budget; overflow carries over."""
    current, total = [], 0
    for s in sample_iter:
        m = s.variate_count
        if total + m > cfg.variate_budget and current:
            yield assemble_batch(current, cfg)
            current, total = [], 0
        current.append(s)
        total += m
    if current:
        yield assemble_batch(current, cfg)


class TrainingSampler:
    """Seeded infinite sample stream over a dataset, with carry-over batching."""

    MAX_CONSECUTIVE_SKIPS = 1000

    def __init__(self, entities: list, cfg: Config, seed: int):
        if not entities:
            raise ValidationError("training needs at least one entity")
        self.entities = entities
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._carry: WindowSample | None = None

    def _next_sample(self, m_cap: int | None) -> WindowSample:
        cap = self.cfg.m_max if m_cap is None else min(m_cap, self.cfg.m_max)
        for _ in range(self.MAX_CONSECUTIVE_SKIPS):
            entity = self.entities[int(self.rng.integers(len(self.entities)))]
            raw = sample_window(entity, self.rng, self.cfg)
            if raw is None:
                continue
            try:
                return permute_and_cap(raw, self.rng, cap)
            except ValidationError:
                continue
        raise ValidationError("no entity produced a usable window after "
                              f"{self.MAX_CONSECUTIVE_SKIPS} draws")

    def next_batch(self, m_cap: int | None = None) -> AssembledBatch:
        samples, total = [], 0
        if self._carry is not None:
            samples.append(self._carry)
            total = self._carry.variate_count
            self._carry = None
        while True:
            s = self._next_sample(m_cap)
            if total + s.variate_count > self.cfg.variate_budget and samples:
                self._carry = s
                break
            samples.append(s)
            total += s.variate_count
            if total >= self.cfg.variate_budget:
                break
        return assemble_batch(samples, self.cfg)
