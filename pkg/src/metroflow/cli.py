"""Command-line interface.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``export-graph``,
``make-synthetic``. Experiments are described by a single JSON config file
(flags only override paths and the seed); unknown config keys are rejected so
provenance stays trustworthy. Exit codes: 0 success, 1 validation failure,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import autodiff as ad
from .data import (
    DataError,
    SplitSpec,
    chronological_split,
    load_flow_file,
    make_windows,
    save_flow_file,
    train_portion,
    zscore_fit,
)
from .evaluation import (
    evaluate,
    evaluate_historical_average,
    historical_average,
    predict_original_scale,
    report_to_json,
)
from .model import (
    CheckpointError,
    ConfigError,
    ForecastModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .synthetic import make_synthetic
from .training import TrainingDiverged, loss_mae_masked, train

_MANAGED_MODEL_KEYS = {"n_stations", "input_steps", "output_steps", "seed"}

_DEFAULTS = {
    "seed": 0,
    "window": {"input_steps": 12, "output_steps": 12, "stride": 1},
    "split": {"mode": "ratio", "ratios": [0.6, 0.2, 0.2]},
    "model": {},
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "training": {"batch_size": 16, "max_epochs": 100, "patience": 10},
}

_SECTION_KEYS = {
    "window": {"input_steps", "output_steps", "stride"},
    "split": {"mode", "ratios", "boundaries"},
    "optimizer": {"lr", "beta1", "beta2", "eps"},
    "training": {"batch_size", "max_epochs", "patience"},
}


def load_experiment_config(path):
    """Parse, default-fill and strictly validate an experiment config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    allowed_top = {"data", "output_dir"} | set(_DEFAULTS)
    unknown = set(raw) - allowed_top
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    if "data" not in raw:
        raise ConfigError(f"{path}: missing required key 'data'")

    cfg = {"data": raw["data"], "output_dir": raw.get("output_dir")}
    cfg["seed"] = raw.get("seed", _DEFAULTS["seed"])
    for section in ("window", "split", "optimizer", "training"):
        merged = dict(_DEFAULTS[section])
        extra = raw.get(section, {})
        if not isinstance(extra, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        bad = set(extra) - _SECTION_KEYS[section]
        if bad:
            raise ConfigError(f"{path}: unknown keys in {section!r}: {sorted(bad)}")
        merged.update(extra)
        cfg[section] = merged
    model_section = raw.get("model", {})
    if not isinstance(model_section, dict):
        raise ConfigError(f"{path}: section 'model' must be an object")
    managed = set(model_section) & _MANAGED_MODEL_KEYS
    if managed:
        raise ConfigError(
            f"{path}: model keys {sorted(managed)} are derived from data/window/seed"
        )
    cfg["model"] = dict(model_section)

    cfg["output_dir"] = os.environ.get("METROFLOW_OUT", cfg["output_dir"])
    if "METROFLOW_SEED" in os.environ:
        cfg["seed"] = int(os.environ["METROFLOW_SEED"])
    return cfg


def _split_spec(section):
    if section["mode"] == "ratio":
        return SplitSpec(mode="ratio", ratios=tuple(section["ratios"]))
    boundaries = section.get("boundaries")
    return SplitSpec(
        mode=section["mode"],
        boundaries=tuple(boundaries) if boundaries is not None else None,
    )


def _prepare(cfg):
    """Dataset, window partitions and train-portion normalization stats."""
    dataset = load_flow_file(cfg["data"])
    w = cfg["window"]
    windows = make_windows(dataset, w["input_steps"], w["output_steps"], w["stride"])
    parts = chronological_split(windows, _split_spec(cfg["split"]))
    stats = zscore_fit(train_portion(dataset, parts[0]))
    return dataset, parts, stats


def _model_config(cfg, dataset):
    w = cfg["window"]
    return ModelConfig.from_dict(
        dict(
            cfg["model"],
            n_stations=dataset.n_stations,
            input_steps=w["input_steps"],
            output_steps=w["output_steps"],
            seed=cfg["seed"],
        )
    )


def cmd_train(args):
    cfg = load_experiment_config(args.config)
    if not cfg["output_dir"]:
        raise ConfigError("train needs output_dir (config key or METROFLOW_OUT)")
    dataset, (train_w, val_w, test_w), stats = _prepare(cfg)
    model = ForecastModel(_model_config(cfg, dataset))
    os.makedirs(cfg["output_dir"], exist_ok=True)
    log_path = os.path.join(cfg["output_dir"], "training_log.jsonl")
    opt = cfg["optimizer"]
    tr = cfg["training"]
    with open(log_path, "w", encoding="utf-8") as log_stream:
        train(
            model,
            train_w,
            val_w,
            stats,
            batch_size=tr["batch_size"],
            max_epochs=tr["max_epochs"],
            patience=tr["patience"],
            lr=opt["lr"],
            beta1=opt["beta1"],
            beta2=opt["beta2"],
            eps=opt["eps"],
            log_stream=log_stream,
        )
    ckpt_path = os.path.join(cfg["output_dir"], "checkpoint.bin")
    save_checkpoint(ckpt_path, model)
    report = evaluate(model, test_w, stats)
    report_path = os.path.join(cfg["output_dir"], "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report) + "\n")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    print(f"report: {report_path}")
    return 0


def _write_predictions_csv(path, windows, preds, station_ids):
    n = len(station_ids)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_origin,horizon_step,station_id,channel,y_true,y_pred\n")
        for w, p in zip(windows, preds):
            for k in range(w.output_steps):
                for s in range(n):
                    for c, channel in enumerate(("inflow", "outflow")):
                        idx = (k * n + s) * 2 + c
                        fh.write(
                            f"{w.t_origin},{k + 1},{station_ids[s]},{channel},"
                            f"{w.y.data[idx]:.17g},{p[idx]:.17g}\n"
                        )


def cmd_eval(args):
    cfg = load_experiment_config(args.config)
    dataset, (train_w, _val_w, test_w), stats = _prepare(cfg)

    if args.baseline == "ha":
        slots_per_day = (24 * 60) // dataset.interval_minutes
        ha = historical_average(train_portion(dataset, train_w), slots_per_day)
        report = evaluate_historical_average(ha, test_w)
        print(report_to_json(report))
        if args.predictions:
            preds = []
            n = dataset.n_stations
            for w in test_w:
                buf = []
                for k in range(w.output_steps):
                    t_abs = w.t_origin + w.input_steps + k
                    for s in range(n):
                        for c in range(2):
                            buf.append(ha.value(t_abs, s, c))
                preds.append(buf)
            _write_predictions_csv(args.predictions, test_w, preds, dataset.station_ids)
        return 0

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --baseline ha)")
    model = load_checkpoint(args.checkpoint)
    expected = _model_config(cfg, dataset)
    want = {name: t.shape for name, t in ForecastModel(expected).parameters().items()}
    have = {name: t.shape for name, t in model.parameters().items()}
    if want != have:
        raise CheckpointError(
            f"checkpoint/config registry mismatch: config expects "
            f"{sorted(want)} with matching shapes, checkpoint has {sorted(have)}"
        )
    report = evaluate(model, test_w, stats)
    print(report_to_json(report))
    if args.predictions:
        preds = predict_original_scale(model, test_w, stats)
        _write_predictions_csv(args.predictions, test_w, preds, dataset.station_ids)
    return 0


def cmd_gradcheck(args):
    cfg = load_experiment_config(args.config)
    dataset = load_flow_file(cfg["data"])
    if dataset.n_stations > 8:
        raise ConfigError(
            f"gradcheck is limited to 8 stations (finite differencing cost), "
            f"data has {dataset.n_stations}"
        )
    model = ForecastModel(_model_config(cfg, dataset))
    mcfg = model.config
    import random as _random

    rng = _random.Random(cfg["seed"])
    x = ad.uniform((mcfg.input_steps, mcfg.n_stations, 2), -1.0, 1.0, rng)
    target = ad.uniform((mcfg.output_steps, mcfg.n_stations, 2), -1.0, 1.0, rng)
    mask = ad.ones(target.shape)

    def objective(_param):
        return loss_mae_masked(model.forward(x), target, mask)

    worst = 0.0
    failed = False
    for name, param in model.parameters().items():
        err = ad.grad_check(objective, param)
        status = "ok" if err < 1e-4 else "FAIL"
        if err >= 1e-4:
            failed = True
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e} [{status}]")
    print(f"worst: {worst:.3e}")
    return 1 if failed else 0


def cmd_export_graph(args):
    model = load_checkpoint(args.checkpoint)
    if model.config.static_graph or not model.config.use_recurrent:
        raise ConfigError(
            "checkpoint has no learned adjacency to export (static or attention-only)"
        )
    adj = model.adjacency()
    n = model.config.n_stations
    with open(args.out, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(",".join(f"{adj[i, j]:.17g}" for j in range(n)) + "\n")
    print(f"adjacency: {args.out}")
    return 0


def cmd_make_synthetic(args):
    dataset = make_synthetic(
        stations=args.stations,
        days=args.days,
        interval_minutes=args.interval,
        seed=args.seed,
        trend=not args.no_trend,
        noise=args.noise,
    )
    save_flow_file(args.out, dataset)
    print(f"wrote {dataset.n_steps} steps x {dataset.n_stations} stations to {args.out}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(prog="metroflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the HA baseline")
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["ha"])
    p.add_argument("--predictions", help="write per-entry predictions CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check per parameter group")
    p.add_argument("config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-graph", help="dump the learned adjacency as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("make-synthetic", help="generate a synthetic flow file")
    p.add_argument("--out", required=True)
    p.add_argument("--stations", type=int, default=8)
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--interval", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-trend", action="store_true")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, CheckpointError, ad.ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
