"""Command-line surface: gen-data, train, forecast, eval, gradcheck, inspect.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric failure.
Errors print one machine-parseable line to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import NumericError, ValidationError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocast",
        description="prototype-routed multivariate time-series forecaster",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--kind", required=True,
                   choices=["kernelsynth", "mixup", "cotemp", "leadlag",
                            "coint", "mixed"])
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--length", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--trace", default=None, help="loss trace CSV path")

    p = sub.add_parser("forecast", help="emit per-quantile forecasts as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--mode", choices=["multivariate", "channel-independent"],
                   default="multivariate")
    p.add_argument("--entity", default=None, help="entity id (default: all)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="rolling-window MASE/CRPS evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["multivariate", "channel-independent", "both"],
                   default="both")
    p.add_argument("--horizon", type=int, default=16)
    p.add_argument("--windows", type=int, default=1)
    p.add_argument("--seasonality", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    return parser


def _cmd_gen_data(args) -> int:
    from .synthetic import CorpusSpec, generate_corpus

    n = args.entities
    counts = dict.fromkeys(
        ["kernelsynth", "mixup", "cotemporaneous", "leadlag", "cointegration"], 0)
    if args.kind == "mixed":
        kinds = list(counts)
        for i in range(n):
            counts[kinds[i % len(kinds)]] += 1
    else:
        key = {"cotemp": "cotemporaneous", "coint": "cointegration"}.get(
            args.kind, args.kind)
        counts[key] = n
    spec = CorpusSpec(length=args.length, noise_std=args.noise, **counts)
    entities = generate_corpus(spec, args.seed, args.out)
    print(f"wrote {len(entities)} entities to {args.out}")
    return 0


def _load_cfg(path) -> Config:
    return load_config(path) if path else Config()


def _cmd_train(args) -> int:
    from .dataio import load_dataset
    from .model import Model
    from .training import train_loop

    cfg = _load_cfg(args.config)
    if args.steps is not None:
        cfg.total_steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    entities = load_dataset(args.data)
    model = Model(cfg, seed=cfg.seed)
    result = train_loop(model, entities, cfg, seed=cfg.seed,
                        checkpoint_path=args.out, trace_path=args.trace)
    print(f"trained {cfg.total_steps} steps in {result.wall_seconds:.1f}s; "
          f"final loss {result.losses[-1]:.6f}; checkpoint {args.out}")
    return 0


def _cmd_forecast(args) -> int:
    from .dataio import load_checkpoint, load_dataset
    from .evaluation import forecast_entity

    model = load_checkpoint(args.ckpt)
    entities = load_dataset(args.data)
    if args.entity is not None:
        entities = [e for e in entities if e.entity_id == args.entity]
        if not entities:
            raise ValidationError(f"entity {args.entity!r} not in dataset")
    qs = model.cfg.quantiles
    lines = ["entity,variate,step," + ",".join(f"q{q:g}" for q in qs)]
    for entity in entities:
        fc = forecast_entity(model, entity.values, args.horizon, args.mode,
                             entity.entity_id)
        for j in range(fc.shape[0]):
            for t in range(fc.shape[1]):
                cells = ",".join(repr(float(v)) for v in fc[j, t])
                lines.append(f"{entity.entity_id},{j},{t},{cells}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote forecasts for {len(entities)} entities to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .dataio import load_checkpoint, load_dataset
    from .evaluation import (EvalConfig, MODE_CHANNEL_INDEPENDENT,
                             MODE_MULTIVARIATE, results_table, rolling_eval)

    model = load_checkpoint(args.ckpt)
    entities = load_dataset(args.data)
    modes = ([MODE_MULTIVARIATE, MODE_CHANNEL_INDEPENDENT]
             if args.mode == "both" else [args.mode])
    rows, skipped = [], []
    for mode in modes:
        ecfg = EvalConfig(prediction_length=args.horizon, windows=args.windows,
                          seasonality=args.seasonality, mode=mode)
        r, s = rolling_eval(model, entities, ecfg, dataset_name=Path(args.data).name)
        rows.extend(r)
        skipped.extend(s)
    if not rows:
        raise ValidationError("no entity was evaluable: "
                              + "; ".join(f"{e}: {r}" for e, r in skipped))
    table = results_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    for entity_id, reason in skipped:
        print(f"skipped {entity_id}: {reason}", file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    from .training import grad_check_model

    cfg = _load_cfg(args.config)
    report = grad_check_model(cfg, seed=args.seed, step=args.step,
                              tolerance=args.tolerance)
    for name in sorted(report.errors):
        print(f"{name}: {report.errors[name]:.3e}")
    for name in report.skipped:
        print(f"{name}: skipped (frozen)")
    print(f"max relative error: {report.max_error:.3e} "
          f"(tolerance {report.tolerance:g})")
    if not report.passed:
        print("failing groups: " + ", ".join(report.failing_groups()),
              file=sys.stderr)
        return 2
    return 0


def _cmd_inspect(args) -> int:
    from .dataio import load_checkpoint

    model = load_checkpoint(args.ckpt)
    from .config import config_to_text

    print(config_to_text(model.cfg), end="")
    total = 0
    for p in model.params:
        print(f"{p.name}  shape={p.value.shape}  dtype={p.value.data.dtype}")
        total += p.value.size
    print(f"total scalars: {total}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return 1 if code else 0
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
