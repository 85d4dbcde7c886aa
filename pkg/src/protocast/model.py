"""Model assembly: named parameters, the full forward pass, loss and forecast."""

from __future__ import annotations

import numpy as np

from .attention import init_encoder_layer, time_encoder_forward
from .autodiff import Parameter, Tensor, no_grad
from .config import Config
from .errors import ValidationError
from .head import init_head_params, quantile_head, sort_quantile_tracks, total_loss
from .preprocess import (
    PreparedBatch,
    build_model_input,
    denormalize_forecast,
    init_embed_params,
    res_patch_embed,
)
from .prototypes import (
    init_prototype_params,
    init_router_params,
    variate_attention_forward,
)


class ModelParams:
    """Ordered collection of uniquely named parameters.

    Indexing returns the underlying tensor, so forward code reads
    ``params["gate.w"]`` directly.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def scalar_count(self) -> int:
        return sum(p.value.size for p in self._params.values())


def init_model_params(cfg: Config, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = ModelParams()
    tensors = {}
    tensors.update(init_embed_params(cfg.d_model, cfg.patch_len, rng))
    for i in range(cfg.time_layers):
        tensors.update(init_encoder_layer(cfg.d_model, rng, f"time.{i}", cfg.use_ffn))
    tensors.update(init_prototype_params(cfg.d_model, cfg.prototypes, cfg.lambda_init, rng))
    for i in range(cfg.latent_layers):
        tensors.update(init_encoder_layer(cfg.d_model, rng, f"lea.{i}", cfg.use_ffn))
    tensors.update(init_router_params(cfg.d_model, rng))
    tensors.update(init_head_params(cfg.d_model, cfg.patch_len, len(cfg.quantiles), rng))
    for name, data in tensors.items():
        params.add(name, data)
    return params


class Model:
    """Configuration plus parameters, with forward / loss / forecast entry points."""

    def __init__(self, cfg: Config, params: ModelParams | None = None,
                 seed: int | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_model_params(cfg, seed)

    def forward(self, batch: PreparedBatch) -> Tensor:
        """Normalized quantile predictions [M x T x |Q|] for the padded horizon."""
        cfg = self.cfg
        h = res_patch_embed(batch, self.params)
        h_t = time_encoder_forward(h, self.params, cfg.time_layers, cfg.heads,
                                   patch_valid=batch.patch_valid, use_ffn=cfg.use_ffn)
        fused = variate_attention_forward(h_t, batch.layout, self.params,
                                          cfg.latent_layers, cfg.heads,
                                          use_ffn=cfg.use_ffn)
        return quantile_head(fused, batch.horizon_patches, self.params,
                             cfg.patch_len, len(cfg.quantiles))

    def loss(self, batch: PreparedBatch):
        """(total, prediction, orthogonality) loss tensors for a training batch."""
        if batch.target_norm is None or batch.target_valid is None:
            raise ValidationError("batch carries no training targets")
        pred = self.forward(batch)
        return total_loss(pred, batch.target_norm, batch.target_valid,
                          self.cfg.quantiles, self.params, self.cfg.alpha)

    def predict_window(self, context: np.ndarray, horizon: int,
                       entity_id: str = "entity") -> np.ndarray:
        """Forecast ``horizon`` steps from a raw context window, physical scale.

        Returns [V x horizon x |Q|] with quantile tracks sorted (non-crossing
        repair happens in normalized space; the de-normalization is monotone).
        The horizon is padded up to whole patches internally and truncated.
        """
        cfg = self.cfg
        padded_h = -(-horizon // cfg.patch_len) * cfg.patch_len
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 1:
            context = context[None, :]
        if context.shape[1] > cfg.l_cap:
            context = context[:, -cfg.l_cap:]
        length = context.shape[1]
        trim = (length + padded_h) % cfg.patch_len
        if trim:
            context = context[:, trim:]
        batch = build_model_input(context, padded_h, cfg.patch_len,
                                  mode=cfg.normalization, entity_id=entity_id)
        with no_grad():
            pred = self.forward(batch).data
        pred = sort_quantile_tracks(pred)[:, :horizon, :]
        return denormalize_forecast(pred, batch.stats, mode=cfg.normalization)

    def config_blob(self) -> str:
        from .config import config_to_text
        return config_to_text(self.cfg)

    def expected_shapes(self) -> dict[str, tuple]:
        return {p.name: p.value.shape for p in self.params}


def median_track(quantiles, forecast: np.ndarray) -> np.ndarray:
    """The 0.5-quantile track (nearest grid point if 0.5 is absent)."""
    qs = np.asarray(quantiles, dtype=np.float64)
    return forecast[..., int(np.argmin(np.abs(qs - 0.5)))]
