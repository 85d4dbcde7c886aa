"""Rolling-window evaluation: MASE, quantile-approximated CRPS, aggregation.

The CRPS estimator is twice the mean pinball loss over the quantile grid,
normalized by the mean absolute actual (weighted-quantile-loss
convention).  Ratios against a seasonal-naive baseline feed a geometric
mean across configurations.  Channel-independent mode forecasts each
variate in its own forward pass, so no cross-variate pathway exists.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .model import Model, median_track

log = logging.getLogger(__name__)

TEST_SPLIT_FRACTION = 0.10

MODE_MULTIVARIATE = "multivariate"
MODE_CHANNEL_INDEPENDENT = "channel-independent"


@dataclass
class EvalConfig:
    prediction_length: int
    windows: int = 1
    seasonality: int = 1
    mode: str = MODE_MULTIVARIATE

    def __post_init__(self):
        if self.prediction_length < 1 or self.windows < 1 or self.seasonality < 1:
            raise ValidationError("prediction_length, windows, seasonality must be >= 1")
        if self.mode not in (MODE_MULTIVARIATE, MODE_CHANNEL_INDEPENDENT):
            raise ValidationError(f"unknown inference mode {self.mode!r}")


def mase(forecast, actual, insample, seasonality: int = 1) -> float:
    """Horizon MAE scaled by the in-sample seasonal-naive MAE."""
    forecast = np.asarray(forecast, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    insample = np.asarray(insample, dtype=np.float64)
    if insample.size <= seasonality:
        raise ValidationError(
            f"in-sample history of {insample.size} too short for seasonality {seasonality}")
    diffs = np.abs(insample[seasonality:] - insample[:-seasonality])
    ok = np.isfinite(diffs)
    if not ok.any() or diffs[ok].mean() == 0.0:
        raise ValidationError("constant in-sample history: MASE scale is zero")
    scale = diffs[ok].mean()
    err = np.abs(actual - forecast)
    keep = np.isfinite(err)
    if not keep.any():
        raise ValidationError("no finite actual/forecast pairs over the horizon")
    return float(err[keep].mean() / scale)


class CrpsResult(NamedTuple):
    value: float
    normalized: bool


def crps_quantile(pred, actual, quantiles) -> CrpsResult:
    """2x mean pinball over (t, q), divided by mean |actual| when nonzero.

    ``pred`` is [T x |Q|] with the quantile axis sorted ascending.
    """
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    qs = np.asarray(quantiles, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != qs.size:
        raise ValidationError(f"prediction shape {pred.shape} does not carry "
                              f"{qs.size} quantile tracks")
    keep = np.isfinite(actual)
    if not keep.any():
        raise ValidationError("no finite actuals over the horizon")
    err = actual[keep, None] - pred[keep, :]
    pin = np.maximum(qs[None, :] * err, (qs[None, :] - 1.0) * err)
    raw = 2.0 * pin.mean()
    denom = np.abs(actual[keep]).mean()
    if denom == 0.0:
        log.warning("all-zero actuals: reporting unnormalized CRPS")
        return CrpsResult(float(raw), False)
    return CrpsResult(float(raw / denom), True)


def seasonal_naive(insample, seasonality: int, horizon: int) -> np.ndarray:
    """Repeat the last observed seasonal cycle over the horizon."""
    insample = np.asarray(insample, dtype=np.float64)
    if insample.size < seasonality:
        raise ValidationError("in-sample history shorter than one season")
    cycle = insample[-seasonality:]
    reps = -(-horizon // seasonality)
    return np.tile(cycle, reps)[:horizon]


def aggregate_geomean(ratios, excluded: list | None = None) -> float:
    """exp(mean(log(ratio))); non-positive ratios are excluded and flagged."""
    vals = []
    for i, r in enumerate(np.asarray(ratios, dtype=np.float64)):
        if r > 0 and np.isfinite(r):
            vals.append(np.log(r))
        else:
            log.warning("geomean: excluding non-positive ratio %r at index %d", r, i)
            if excluded is not None:
                excluded.append(i)
    if not vals:
        raise ValidationError("no positive ratios to aggregate")
    return float(np.exp(np.mean(vals)))


def forecast_entity(model: Model, context: np.ndarray, horizon: int,
                    mode: str, entity_id: str) -> np.ndarray:
    """[V x horizon x |Q|] physical-scale quantile forecast under either mode."""
    if mode == MODE_MULTIVARIATE:
        return model.predict_window(context, horizon, entity_id=entity_id)
    tracks = [model.predict_window(context[j:j + 1], horizon,
                                   entity_id=f"{entity_id}/var_{j}")
              for j in range(context.shape[0])]
    return np.concatenate(tracks, axis=0)


def rolling_eval(model: Model, entities: list, ecfg: EvalConfig,
                 dataset_name: str = "dataset"):
    """Per-entity metrics over non-overlapping end-anchored windows.

    Returns (rows, skipped): one row per entity with window- and
    variate-averaged MASE/CRPS plus ratios against the seasonal-naive
    baseline; skipped holds (entity_id, reason) pairs.
    """
    h, w = ecfg.prediction_length, ecfg.windows
    rows, skipped = [], []
    for entity in entities:
        length = entity.length
        test_len = h * w
        if test_len > int(TEST_SPLIT_FRACTION * length):
            skipped.append((entity.entity_id,
                            f"{w} windows of {h} exceed the {TEST_SPLIT_FRACTION:.0%} test split"))
            continue
        if length - test_len <= ecfg.seasonality:
            skipped.append((entity.entity_id, "context shorter than one season"))
            continue
        m_mase, m_crps, n_mase, n_crps = [], [], [], []
        degenerate = None
        for win in range(w):
            split = length - (w - win) * h
            context = entity.values[:, :split]
            actual = entity.values[:, split:split + h]
            forecast = forecast_entity(model, context, h, ecfg.mode, entity.entity_id)
            for j in range(context.shape[0]):
                try:
                    naive = seasonal_naive(context[j][np.isfinite(context[j])],
                                           ecfg.seasonality, h)
                    m_mase.append(mase(median_track(model.cfg.quantiles, forecast[j]),
                                       actual[j], context[j], ecfg.seasonality))
                    n_mase.append(mase(naive, actual[j], context[j], ecfg.seasonality))
                except ValidationError as exc:
                    degenerate = str(exc)
                    break
                m_crps.append(crps_quantile(forecast[j], actual[j],
                                            model.cfg.quantiles).value)
                naive_tracks = np.tile(naive[:, None], (1, len(model.cfg.quantiles)))
                n_crps.append(crps_quantile(naive_tracks, actual[j],
                                            model.cfg.quantiles).value)
            if degenerate:
                break
        if degenerate:
            skipped.append((entity.entity_id, degenerate))
            continue
        row = {
            "dataset": dataset_name,
            "entity": entity.entity_id,
            "mode": ecfg.mode,
            "H": h,
            "W": w,
            "mase": float(np.mean(m_mase)),
            "crps": float(np.mean(m_crps)),
            "mase_ratio": float(np.mean(m_mase) / np.mean(n_mase)),
            "crps_ratio": float(np.mean(m_crps) / np.mean(n_crps)),
        }
        rows.append(row)
    return rows, skipped


RESULT_COLUMNS = ("dataset", "entity", "mode", "H", "W",
                  "mase", "crps", "mase_ratio", "crps_ratio")


def results_table(rows: list) -> str:
    """CSV text with one row per (entity, mode) and geomean summary rows."""
    lines = [",".join(RESULT_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            repr(row[c]) if isinstance(row[c], float) else str(row[c])
            for c in RESULT_COLUMNS))
    for mode in sorted({r["mode"] for r in rows}):
        sub = [r for r in rows if r["mode"] == mode]
        summary = {
            "dataset": "summary",
            "entity": "geomean",
            "mode": mode,
            "H": sub[0]["H"],
            "W": sub[0]["W"],
            "mase": float(np.mean([r["mase"] for r in sub])),
            "crps": float(np.mean([r["crps"] for r in sub])),
            "mase_ratio": aggregate_geomean([r["mase_ratio"] for r in sub]),
            "crps_ratio": aggregate_geomean([r["crps_ratio"] for r in sub]),
        }
        lines.append(",".join(
            repr(summary[c]) if isinstance(summary[c], float) else str(summary[c])
            for c in RESULT_COLUMNS))
    return "\n".join(lines) + "\n"


def write_results(rows: list, path):
    Path(path).write_text(results_table(rows), encoding="utf-8")
