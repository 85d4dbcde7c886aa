"""Synthetic corpus construction: GP kernel composition plus multivariatizers.

Univariate base series are drawn from Gaussian-process priors whose
kernels are random sums/products of four families (linear, squared
exponential, periodic, white noise).  Multivariate entities are made by
injecting explicit dependencies into base series: instantaneous linear or
tanh mixing, lead-lag shifts, or a cointegrated random spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .preprocess import EntitySeries

KERNEL_KINDS = ("linear", "sqexp", "periodic", "whitenoise")
JITTER_START = 1e-10
JITTER_DOUBLINGS = 6


@dataclass
class KernelSpec:
    """A kernel family with hyperparameters, or a +/* composition node."""

    kind: str
    params: dict = field(default_factory=dict)
    children: tuple = ()

    def gram(self, t: np.ndarray) -> np.ndarray:
        d = t[:, None] - t[None, :]
        p = self.params
        if self.kind == "sum":
            return sum(c.gram(t) for c in self.children)
        if self.kind == "product":
            out = self.children[0].gram(t)
            for c in self.children[1:]:
                out = out * c.gram(t)
            return out
        if self.kind == "linear":
            c = p.get("offset", 0.0)
            scale = max(float(t[-1] - t[0]), 1.0)
            return p.get("variance", 1.0) * ((t[:, None] - c) * (t[None, :] - c)) / scale**2
        if self.kind == "sqexp":
            ell = p["length_scale"]
            return p.get("variance", 1.0) * np.exp(-0.5 * (d / ell) ** 2)
        if self.kind == "periodic":
            ell = p.get("length_scale", 1.0)
            return p.get("variance", 1.0) * np.exp(
                -2.0 * np.sin(np.pi * d / p["period"]) ** 2 / ell**2
            )
        if self.kind == "whitenoise":
            return p.get("variance", 1.0) * np.eye(t.size)
        raise ValidationError(f"unknown kernel kind {self.kind!r}")

    def describe(self) -> dict:
        if self.children:
            return {"kind": self.kind,
                    "children": [c.describe() for c in self.children]}
        return {"kind": self.kind,
                "params": {k: float(v) for k, v in self.params.items()}}


def draw_kernel_spec(rng: np.random.Generator, length: int,
                     max_components: int = 5) -> KernelSpec:
    """Random composition of 1..max_components base kernels with +/* operators."""
    def base() -> KernelSpec:
        kind = KERNEL_KINDS[int(rng.integers(len(KERNEL_KINDS)))]
        if kind == "linear":
            return KernelSpec(kind, {"variance": float(rng.uniform(0.25, 2.0)),
                                     "offset": float(rng.uniform(0, length))})
        if kind == "sqexp":
            ell = float(np.exp(rng.uniform(np.log(2.0), np.log(length / 4))))
            return KernelSpec(kind, {"variance": float(rng.uniform(0.25, 2.0)),
                                     "length_scale": ell})
        if kind == "periodic":
            period = float(np.exp(rng.uniform(np.log(4.0), np.log(length / 2))))
            return KernelSpec(kind, {"variance": float(rng.uniform(0.25, 2.0)),
                                     "period": period,
                                     "length_scale": float(rng.uniform(0.5, 2.0))})
        return KernelSpec(kind, {"variance": float(rng.uniform(0.01, 0.25))})

    n = int(rng.integers(1, max_components + 1))
    spec = base()
    for _ in range(n - 1):
        op = "sum" if rng.random() < 0.5 else "product"
        spec = KernelSpec(op, children=(spec, base()))
    return spec


FORECASTABLE_PERIODS = (16.0, 32.0)


def draw_forecastable_spec(rng: np.random.Generator, length: int) -> KernelSpec:
    """Kernel mix with long-horizon structure plus short-range innovation.

    A strongly coherent periodic component (period from a small discrete
    set, so a desk-scale model can amortize the pattern) carries
    predictability across the forecast horizon; a short-length-scale
    squared-exponential adds innovation that only the last few steps of
    history reveal, which is the regime where cross-variate lead-lag
    information pays off.
    """
    periods = [p for p in FORECASTABLE_PERIODS if p <= length / 4]
    periodic = KernelSpec("periodic", {
        "variance": 1.5,
        "period": float(rng.choice(periods or [length / 4])),
        "length_scale": float(rng.uniform(0.7, 1.3)),
    })
    se = KernelSpec("sqexp", {
        "variance": float(rng.uniform(0.3, 0.5)),
        "length_scale": float(np.exp(rng.uniform(np.log(3.0), np.log(6.0)))),
    })
    noise = KernelSpec("whitenoise", {"variance": 0.005})
    return KernelSpec("sum", children=(KernelSpec("sum", children=(periodic, se)),
                                       noise))


def sample_gp(spec: KernelSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    """One GP path on an evenly spaced grid, via jittered Cholesky."""
    if length < 2:
        raise ValidationError(f"need length >= 2, got {length}")
    t = np.arange(length, dtype=np.float64)
    gram = spec.gram(t)
    jitter = JITTER_START
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            chol = np.linalg.cholesky(gram + jitter * np.eye(length))
        except np.linalg.LinAlgError:
            jitter *= 2.0
            continue
        return chol @ rng.standard_normal(length)
    raise NumericError("kernel Gram matrix not factorizable within jitter budget")


def kernel_synth(rng: np.random.Generator, length: int,
                 max_components: int = 5, max_retries: int = 8) -> np.ndarray:
    """Univariate series from a freshly drawn kernel composition.

    A failed factorization regenerates with a new kernel draw.
    """
    if max_components < 1:
        raise ValidationError("max_components must be >= 1")
    for _ in range(max_retries):
        spec = draw_kernel_spec(rng, length, max_components)
        try:
            return sample_gp(spec, length, rng)
        except NumericError:
            continue
    raise NumericError(f"no factorizable kernel draw in {max_retries} attempts")


def mix_series(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    """Convex combination w*a + (1-w)*b of two equal-length series."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape} vs {b.shape}")
    if not (0.0 <= weight <= 1.0):
        raise ValidationError(f"mix weight must lie in [0, 1], got {weight}")
    return weight * a + (1.0 - weight) * b


def cotemporaneous_multivariatize(bases: np.ndarray, mixing: np.ndarray,
                                  nonlinearity: str | None = None) -> np.ndarray:
    """Instantaneous mixing y_t = phi(W x_t); phi is identity or tanh."""
    bases = np.asarray(bases, dtype=np.float64)
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.ndim != 2 or mixing.shape[1] != bases.shape[0]:
        raise ValidationError(
            f"mixing {mixing.shape} incompatible with {bases.shape[0]} base series"
        )
    if not np.abs(mixing).sum(axis=1).all():
        raise ValidationError("mixing matrix has an all-zero row")
    out = mixing @ bases
    if nonlinearity is None or nonlinearity == "identity":
        return out
    if nonlinearity == "tanh":
        return np.tanh(out)
    raise ValidationError(f"unknown nonlinearity {nonlinearity!r}")


def sequential_multivariatize(base: np.ndarray, kind: str, rng: np.random.Generator,
                              lag: int = 1, noise_std: float = 0.05,
                              reversion: float = 0.9) -> np.ndarray:
    """Two-variate entity with a temporal dependency on the base series.

    lead-lag: variate 2 is variate 1 shifted by ``lag`` (leading positions
    filled with the first value) plus observation noise.  cointegration:
    variate 2 is variate 1 plus a stationary AR(1) spread with coefficient
    ``reversion``.
    """
    base = np.asarray(base, dtype=np.float64)
    n = base.size
    if kind == "leadlag":
        if not 0 <= lag < n:
            raise ValidationError(f"lag {lag} outside [0, {n})")
        lagged = np.concatenate([np.full(lag, base[0]), base[:n - lag]])
        lagged = lagged + noise_std * rng.standard_normal(n)
        return np.stack([base, lagged])
    if kind == "cointegration":
        if not 0.0 < reversion < 1.0:
            raise ValidationError(f"reversion must lie in (0, 1), got {reversion}")
        innov = noise_std * rng.standard_normal(n)
        spread = np.empty(n)
        spread[0] = innov[0] / np.sqrt(1.0 - reversion**2)
        for i in range(1, n):
            spread[i] = reversion * spread[i - 1] + innov[i]
        return np.stack([base, base + spread])
    raise ValidationError(f"unknown sequential kind {kind!r}")


@dataclass
class CorpusSpec:
    """Counts per generator family plus shared generation parameters."""

    length: int = 512
    kernelsynth: int = 0
    mixup: int = 0
    cotemporaneous: int = 0
    leadlag: int = 0
    cointegration: int = 0
    max_components: int = 5
    cotemp_variates: int = 3
    cotemp_bases: int = 2
    lag_choices: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    noise_std: float = 0.05
    reversion: float = 0.9
    # "composed": fully random kernel compositions; "forecastable": short-
    # range SE + periodic + small noise, for dependency-injection bases
    base: str = "composed"

    @property
    def total_entities(self) -> int:
        return (self.kernelsynth + self.mixup + self.cotemporaneous
                + self.leadlag + self.cointegration)


def generate_entities(spec: CorpusSpec, seed: int):
    """Deterministic entity stream: (EntitySeries, generator metadata) pairs."""
    if spec.total_entities == 0:
        raise ValidationError("corpus spec requests zero entities")
    seeds = np.random.SeedSequence(seed).spawn(spec.total_entities)
    plan = (
        [("kernelsynth", None)] * spec.kernelsynth
        + [("mixup", None)] * spec.mixup
        + [("cotemporaneous", None)] * spec.cotemporaneous
        + [("leadlag", None)] * spec.leadlag
        + [("cointegration", None)] * spec.cointegration
    )
    def draw_base(rng):
        if spec.base == "forecastable":
            return sample_gp(draw_forecastable_spec(rng, spec.length),
                             spec.length, rng)
        return kernel_synth(rng, spec.length, spec.max_components)

    out = []
    for i, ((kind, _), ss) in enumerate(zip(plan, seeds)):
        rng = np.random.default_rng(ss)
        meta = {"kind": kind, "seed": int(seed), "index": i}
        if kind == "kernelsynth":
            values = kernel_synth(rng, spec.length, spec.max_components)[None, :]
        elif kind == "mixup":
            a = kernel_synth(rng, spec.length, spec.max_components)
            b = kernel_synth(rng, spec.length, spec.max_components)
            w = float(rng.uniform())
            values = mix_series(a, b, w)[None, :]
            meta["weight"] = w
        elif kind == "cotemporaneous":
            bases = np.stack([kernel_synth(rng, spec.length, spec.max_components)
                              for _ in range(spec.cotemp_bases)])
            mixing = rng.normal(size=(spec.cotemp_variates, spec.cotemp_bases))
            zero = np.abs(mixing).sum(axis=1) == 0
            mixing[zero, 0] = 1.0
            phi = "tanh" if rng.random() < 0.5 else "identity"
            values = cotemporaneous_multivariatize(bases, mixing, phi)
            meta["nonlinearity"] = phi
        elif kind == "leadlag":
            base = draw_base(rng)
            lag = int(rng.choice(spec.lag_choices))
            values = sequential_multivariatize(base, "leadlag", rng, lag=lag,
                                               noise_std=spec.noise_std)
            meta["lag"] = lag
            meta["noise_std"] = spec.noise_std
        else:
            base = draw_base(rng)
            values = sequential_multivariatize(base, "cointegration", rng,
                                               noise_std=spec.noise_std,
                                               reversion=spec.reversion)
            meta["reversion"] = spec.reversion
        if not np.isfinite(values).all():
            raise NumericError(f"generator {kind} produced non-finite values")
        entity = EntitySeries(entity_id=f"{kind}_{i:04d}", values=values,
                              frequency_tag="synthetic")
        out.append((entity, meta))
    return out


def generate_corpus(spec: CorpusSpec, seed: int, out_dir) -> list:
    """Generate and write a corpus; returns the entity list."""
    from .dataio import save_dataset

    pairs = generate_entities(spec, seed)
    save_dataset([e for e, _ in pairs], out_dir,
                 generator_meta=[m for _, m in pairs])
    return [e for e, _ in pairs]
