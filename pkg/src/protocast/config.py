"""Run configuration: model, sampler and optimizer settings.

One flat key-value text format covers everything the design ledger makes
switchable (hidden width, prototype count, normalization mode, quantile
set, sampler limits, schedule, FFN flag) so no run needs a code edit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ValidationError

DEFAULT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class Config:
    # model
    d_model: int = 32
    patch_len: int = 16
    time_layers: int = 2
    latent_layers: int = 2
    heads: int = 4
    prototypes: int = 4
    quantiles: tuple = DEFAULT_QUANTILES
    alpha: float = 0.1
    lambda_init: float = 0.5
    use_ffn: bool = False
    normalization: str = "asinh"  # or "arcsin" (literal mode, clamped)
    # sampler
    l_min: int = 32
    l_cap: int = 512
    t_max: int = 64
    m_max: int = 8
    variate_budget: int = 64
    # optimizer / schedule
    total_steps: int = 2000
    peak_lr: float = 2e-3
    final_lr: float = 2e-4
    warmup_fraction: float = 0.001
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    # curriculum: joint training by default; optional univariate warm phase
    two_stage: bool = False
    stage_one_fraction: float = 0.3
    univariate_replay: float = 0.25
    # parameter name prefixes excluded from optimization / gradcheck
    freeze: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.patch_len < 1 or self.prototypes < 1:
            raise ValidationError("patch_len and prototypes must be positive")
        qs = tuple(float(q) for q in self.quantiles)
        if any(not (0.0 < q < 1.0) for q in qs):
            raise ValidationError(f"quantiles must lie in (0, 1): {qs}")
        if any(b >= a for a, b in zip(qs[1:], qs)):
            raise ValidationError(f"quantiles must be strictly increasing: {qs}")
        self.quantiles = qs
        if self.normalization not in ("asinh", "arcsin"):
            raise ValidationError(f"unknown normalization mode {self.normalization!r}")
        if self.t_max % self.patch_len != 0:
            raise ValidationError(
                f"t_max {self.t_max} must be a multiple of patch_len {self.patch_len}"
            )
        if self.m_max < 1 or self.variate_budget < self.m_max:
            raise ValidationError("need m_max >= 1 and variate_budget >= m_max")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValidationError("warmup_fraction must lie in (0, 1)")
        if not (0.0 < self.final_lr <= self.peak_lr):
            raise ValidationError("need 0 < final_lr <= peak_lr")
        if isinstance(self.freeze, str):
            self.freeze = tuple(s for s in self.freeze.split(",") if s)
        else:
            self.freeze = tuple(self.freeze)

    @property
    def horizon_patches(self) -> int:
        return self.t_max // self.patch_len


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ValidationError(f"config key {name}: expected boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if name == "freeze":
            return tuple(parts)
        return tuple(float(p) for p in parts)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: Config) -> str:
    """Canonical flat key-value text: one ``key = value`` line, keys sorted."""
    lines = []
    for f in sorted(dataclasses.fields(Config), key=lambda f: f.name):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> Config:
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    kinds = {f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, kinds[key])
    return Config(**values)


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return config_from_text(fh.read())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc


def save_config(cfg: Config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
