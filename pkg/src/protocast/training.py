"""Optimization: AdamW with linear warmup / cosine decay, seeded training loop.

The loop is fully deterministic under a fixed seed: one sampler stream,
one optimizer, single-threaded numpy.  A non-finite loss halts the run and
dumps the offending batch's sample references for reproduction.  A
gradient-check mode rebuilds a tiny synthetic batch and verifies every
parameter group against central differences.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import grad_check_report, no_grad
from .config import Config
from .errors import NumericError, ValidationError
from .model import Model
from .sampling import TrainingSampler, assemble_batch, permute_and_cap, sample_window
from .synthetic import CorpusSpec, generate_entities


@dataclass
class Schedule:
    peak_lr: float
    final_lr: float
    warmup_fraction: float
    total_steps: int

    def __post_init__(self):
        if not (0.0 < self.final_lr <= self.peak_lr):
            raise ValidationError("need 0 < final_lr <= peak_lr")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValidationError("warmup_fraction must lie in (0, 1)")
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_fraction * self.total_steps))


def lr_at_step(step: int, sched: Schedule) -> float:
    """Linear 0 -> peak over the warmup span, then cosine peak -> final."""
    if not 0 <= step <= sched.total_steps:
        raise ValidationError(f"step {step} outside [0, {sched.total_steps}]")
    w = sched.warmup_steps
    if step <= w:
        return sched.peak_lr * step / w
    progress = (step - w) / (sched.total_steps - w)
    return sched.final_lr + (sched.peak_lr - sched.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.95,
               weight_decay: float = 0.1, eps: float = 1e-8,
               skip=()) -> None:
    """Decoupled weight decay alongside the bias-corrected Adam update."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        if any(p.name.startswith(prefix) for prefix in skip):
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.value.data *= 1.0 - lr * weight_decay
        p.value.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.value.grad = p.grad * scale
    return norm


@dataclass
class TrainResult:
    steps: list
    losses: list
    pred_losses: list
    orth_losses: list
    lrs: list
    checkpoints: list
    wall_seconds: float

    def smoothed_loss(self, step: int, window: int = 50) -> float:
        """Mean loss over the trailing ``window`` recorded steps ending at ``step``."""
        i = self.steps.index(step)
        lo = max(0, i + 1 - window)
        return float(np.mean(self.losses[lo:i + 1]))

    def trace_text(self) -> str:
        lines = ["step,loss,pred_loss,orth_loss,lr"]
        for s, l, lp, lo, lr in zip(self.steps, self.losses, self.pred_losses,
                                    self.orth_losses, self.lrs):
            lines.append(f"{s},{l!r},{lp!r},{lo!r},{lr!r}")
        return "\n".join(lines) + "\n"


def train_loop(model: Model, entities: list, cfg: Config, seed: int,
               checkpoint_path=None, trace_path=None,
               on_step=None) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps over a seeded sample stream."""
    from .dataio import save_checkpoint

    sampler = TrainingSampler(entities, cfg, seed)
    sched = Schedule(cfg.peak_lr, cfg.final_lr, cfg.warmup_fraction, cfg.total_steps)
    state = OptimizerState()
    result = TrainResult([], [], [], [], [], [], 0.0)
    stage1_end = int(cfg.stage_one_fraction * cfg.total_steps) if cfg.two_stage else 0
    started = time.time()
    for step in range(1, cfg.total_steps + 1):
        if cfg.two_stage and step <= stage1_end:
            m_cap = 1
        elif cfg.two_stage and sampler.rng.random() < cfg.univariate_replay:
            m_cap = 1
        else:
            m_cap = None
        batch = sampler.next_batch(m_cap=m_cap)
        model.params.zero_grad()
        total, l_pred, l_orth = model.loss(batch.prepared)
        loss_val = float(total.data)
        if not math.isfinite(loss_val):
            refs = json.dumps([r for r in batch.prepared.sample_refs], indent=2)
            if checkpoint_path is not None:
                Path(str(checkpoint_path) + ".failed_batch.json").write_text(refs)
            raise NumericError(
                f"non-finite loss at step {step}; offending batch: {refs}")
        total.backward()
        clip_gradients(list(model.params), cfg.clip_norm)
        lr = lr_at_step(step, sched)
        adamw_step(model.params, state, lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   weight_decay=cfg.weight_decay, eps=cfg.adam_eps,
                   skip=cfg.freeze)
        result.steps.append(step)
        result.losses.append(loss_val)
        result.pred_losses.append(float(l_pred.data))
        result.orth_losses.append(float(l_orth.data))
        result.lrs.append(lr)
        if on_step is not None:
            on_step(step, loss_val)
        if checkpoint_path is not None and (
                step % cfg.checkpoint_every == 0 or step == cfg.total_steps):
            save_checkpoint(model, checkpoint_path)
            result.checkpoints.append(step)
    result.wall_seconds = time.time() - started
    if trace_path is not None:
        Path(trace_path).write_text(result.trace_text(), encoding="utf-8")
    return result


@dataclass
class GradCheckReport:
    errors: dict
    skipped: list
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failing_groups(self) -> list:
        return sorted(name for name, err in self.errors.items()
                      if err >= self.tolerance)


def _well_conditioned(model: Model, batch, checked, kink_margin: float,
                      grad_floor: float) -> bool:
    """Preconditions of the finite-difference oracle at this evaluation point.

    The loss must be twice differentiable within the probe radius (no
    pinball error cell near its kink) and every checked gradient scalar
    must sit clear of the round-off noise floor.
    """
    with no_grad():
        pred = model.forward(batch.prepared).data
    valid = batch.prepared.target_valid.astype(bool)
    cells = np.abs(batch.prepared.target_norm[:, :, None] - pred)[valid]
    if cells.size == 0 or cells.min() <= kink_margin:
        return False
    model.params.zero_grad()
    model.loss(batch.prepared)[0].backward()
    return all(np.abs(p.grad).min() >= grad_floor for p in checked)


def grad_check_model(cfg: Config, seed: int = 0, step: float = 1e-5,
                     tolerance: float = 1e-4,
                     max_redraws: int = 32) -> GradCheckReport:
    """Finite-difference check of the full training loss on one tiny batch.

    The batch holds two entities with one and two variates (an odd row
    count keeps quantile-grid gradients from cancelling exactly); draws
    that violate the oracle's differentiability or conditioning
    preconditions are deterministically redrawn.
    """
    model = Model(cfg, seed=seed)
    length = max(4 * cfg.l_min, 4 * (cfg.patch_len + cfg.l_min))
    spec = CorpusSpec(length=length, kernelsynth=1, leadlag=1, noise_std=0.02)
    entities = {e.entity_id: e for e, _ in generate_entities(spec, seed)}
    uni = entities["kernelsynth_0000"]
    multi = entities["leadlag_0001"]
    checked = [p for p in model.params
               if not any(p.name.startswith(x) for x in cfg.freeze)]
    skipped = [p.name for p in model.params
               if any(p.name.startswith(x) for x in cfg.freeze)]

    rng = np.random.default_rng(seed + 1)
    batch = None
    for _ in range(max_redraws):
        samples = []
        for entity, cap in ((uni, 1), (multi, 2)):
            raw = sample_window(entity, rng, cfg)
            if raw is None:
                raise ValidationError(
                    f"gradcheck corpus entity {entity.entity_id!r} too short")
            samples.append(permute_and_cap(raw, rng, min(cap, cfg.m_max)))
        candidate = assemble_batch(samples, cfg)
        if _well_conditioned(model, candidate, checked,
                             kink_margin=max(100.0 * step, 1e-3),
                             grad_floor=1e-7):
            batch = candidate
            break
    if batch is None:
        raise NumericError(
            f"no well-conditioned gradcheck batch in {max_redraws} draws")

    def f():
        return model.loss(batch.prepared)[0]

    errors = grad_check_report(f, checked, step=step)
    return GradCheckReport(errors=errors, skipped=skipped, tolerance=tolerance)
