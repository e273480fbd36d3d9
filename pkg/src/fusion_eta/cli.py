"""Command-line surface: data generation, preprocessing, training, evaluation,
counting, gradient checks, round-count sweeps, and baseline runs.

Every command prints line-delimited JSON records with stable field names so
scripts can parse output without scraping.  Errors become a single-line JSON
record on stderr plus a nonzero exit status:

    0  success
    2  validation error (bad flags, bad config, bad data, failed check)
    3  numeric divergence during training
    4  I/O error (missing or unreadable file)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import cells
from .config import (CliConfig, EtaModelConfig, GeneratorConfig, TrainConfig,
                     apply_overrides, config_from_dict, config_to_dict, load_config)
from .data import (DropSummary, generate_dataset, preprocess_filter, read_jsonl,
                   split_by_weeks, write_jsonl)
from .errors import DivergenceError, DomainError, ValidationError
from .linalg import make_rng
from .metrics import MetricsReport
from .model import (EtaModel, fit_constant_mean, load_checkpoint,
                    route_eta_predictions, save_checkpoint)
from .train import (evaluate, gradcheck_cell, gradcheck_model,
                    report_for_predictions, sweep_r, toy_model_config, train)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _emit(record: dict, stream=None) -> None:
    """One machine-parsable record per line."""
    print(json.dumps(record), file=stream or sys.stdout, flush=True)


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors share the JSON error path."""

    def error(self, message):
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# config plumbing


def _resolve_config(config_path: str | None, overrides: list[str]) -> CliConfig:
    """Defaults <- optional config file <- repeated --set section.field=value."""
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
    else:
        raw = {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON config file with "
                     "generator/model/train sections")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.FIELD=VALUE",
                     help="override one config value (repeatable)")


def _report_record(command: str, split: str, report: MetricsReport) -> dict:
    return {"command": command, "split": split, "mape": report.mape,
            "mae": report.mae, "rmse": report.rmse, "n": report.n}


def _load_split(path: str, split: str, tz_offset_s: int):
    """Read, filter, and select one split (or the whole filtered set)."""
    records = read_jsonl(path)
    kept, summary = preprocess_filter(records)
    if split == "all":
        return kept, summary
    tr, va, te = split_by_weeks(kept, tz_offset_s)
    return {"train": tr, "val": va, "test": te}[split], summary


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args.config, args.overrides)
    n = write_jsonl(generate_dataset(cfg.generator), args.out)
    _emit({"command": "gen-data", "trips": n, "out": args.out,
           "seed": cfg.generator.seed, "weeks": cfg.generator.weeks})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    records = read_jsonl(args.input)
    kept, summary = preprocess_filter(records)
    write_jsonl(kept, args.out)
    _emit({"command": "preprocess", "out": args.out, **json.loads(summary.to_json())})
    return EXIT_OK


def _build_model(cfg: CliConfig) -> EtaModel:
    model_cfg = cfg.model
    if cfg.train.r >= 0 and model_cfg.rnn_variant == "fusion":
        model_cfg = dataclasses.replace(model_cfg, r=cfg.train.r)
    return EtaModel(model_cfg, make_rng(cfg.train.seed))


def cmd_train(args) -> int:
    cfg = _resolve_config(args.config, args.overrides)
    tz = cfg.generator.tz_offset_s
    if args.data is not None:
        records = read_jsonl(args.data)
    else:
        records = list(generate_dataset(cfg.generator))
    kept, _ = preprocess_filter(records)
    train_recs, val_recs, test_recs = split_by_weeks(kept, tz)

    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(args.out_dir, "checkpoint.json")
    report_path = os.path.join(args.out_dir, "report.json")

    model = _build_model(cfg)
    with open(log_path, "w", encoding="utf-8") as log_fh:
        sink = lambda row: print(json.dumps(row), file=log_fh)  # noqa: E731
        result = train(model, train_recs, val_recs, cfg.train, tz, log_sink=sink)

    test_report = evaluate(result.model, test_recs, cfg.train.batch_size, tz) if test_recs else None
    save_checkpoint(result.model, ckpt_path,
                    extra={"best_step": result.best_step, "steps_run": result.steps_run,
                           "config": config_to_dict(cfg)})
    summary = {"command": "train", "steps_run": result.steps_run,
               "best_step": result.best_step,
               "best_val": {"mape": result.best_val.mape, "mae": result.best_val.mae,
                            "rmse": result.best_val.rmse, "n": result.best_val.n},
               "checkpoint": ckpt_path, "metrics_log": log_path}
    if test_report is not None:
        summary["test"] = {"mape": test_report.mape, "mae": test_report.mae,
                           "rmse": test_report.rmse, "n": test_report.n}
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    records, _ = _load_split(args.data, args.split, args.tz_offset_s)
    report = evaluate(model, records, tz_offset_s=args.tz_offset_s)
    _emit(_report_record("eval", args.split, report))
    return EXIT_OK


def _count_rows(variant: str, m: int, n: int, r: int, seq_len: int) -> list[dict]:
    variants = list(cells.VARIANTS) if variant == "all" else [variant]
    rows = []
    for v in variants:
        rv = r if v == "fusion" else 0
        params = cells.init_params(v, m, n, rv, make_rng(0))
        instrumented = sum(cells.measure_step_mults(params) for _ in range(seq_len))
        rows.append({"command": "count", "variant": v, "m": m, "n": n, "r": rv,
                     "seq_len": seq_len,
                     "params": cells.param_count(v, m, n, rv),
                     "params_enumerated": cells.count_scalar_params(params),
                     "mults": cells.mult_count(v, m, n, rv, seq_len),
                     "mults_instrumented": instrumented})
    return rows


def cmd_count(args) -> int:
    for row in _count_rows(args.variant, args.m, args.n, args.r, args.seq_len):
        _emit(row)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = []
    if args.variant == "all":
        checks = [("fusion", rr) for rr in (0, 1, 2, 3)]
        checks += [("elman", 0), ("gru", 0), ("lstm", 0), ("model", args.r)]
    else:
        checks = [(args.variant, args.r)]
    all_passed = True
    for kind, r in checks:
        if kind == "model":
            report = gradcheck_model(toy_model_config("fusion", r=r), tolerance=args.tolerance)
        else:
            report = gradcheck_cell(kind, r=r, tolerance=args.tolerance)
        all_passed = all_passed and report.passed
        _emit({"command": "gradcheck", "target": kind, "r": r,
               "max_rel_err": report.max_rel_err, "tolerance": report.tolerance,
               "passed": report.passed, "per_tensor": report.per_tensor})
    if not all_passed:
        raise ValidationError("gradient check failed; see per-tensor records above")
    return EXIT_OK


def cmd_sweep_r(args) -> int:
    cfg = _resolve_config(args.config, args.overrides)
    tz = cfg.generator.tz_offset_s
    try:
        r_values = [int(part) for part in args.r_list.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"--r-list must be comma-separated integers: {exc}") from exc
    if args.data is not None:
        records = read_jsonl(args.data)
    else:
        records = list(generate_dataset(cfg.generator))
    kept, _ = preprocess_filter(records)
    train_recs, val_recs, test_recs = split_by_weeks(kept, tz)
    rows = sweep_r(r_values, cfg.model, cfg.train, train_recs, val_recs, test_recs, tz)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            print(json.dumps(row), file=fh)
    for row in rows:
        _emit({"command": "sweep-r", **row})
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _resolve_config(args.config, args.overrides)
    tz = cfg.generator.tz_offset_s
    records = read_jsonl(args.data)
    kept, _ = preprocess_filter(records)
    if args.split == "all":
        if args.kind == "ffn":
            raise ValidationError("baseline ffn needs week splits; use --split test/val/train")
        fit_recs = eval_recs = kept
        val_recs = []
    else:
        tr, va, te = split_by_weeks(kept, tz)
        fit_recs, val_recs = tr, va
        eval_recs = {"train": tr, "val": va, "test": te}[args.split]
    if not eval_recs:
        raise DomainError(f"split {args.split!r} holds no trips")

    if args.kind == "route-eta":
        report = report_for_predictions(eval_recs, route_eta_predictions(eval_recs))
    elif args.kind == "mean":
        mean = fit_constant_mean(fit_recs)
        report = report_for_predictions(eval_recs, np.full(len(eval_recs), mean))
    else:  # ffn: train the pooled feed-forward model, then score the split
        ffn_cfg = CliConfig(generator=cfg.generator,
                            model=dataclasses.replace(cfg.model, rnn_variant="none-ffn"),
                            train=cfg.train)
        model = _build_model(ffn_cfg)
        result = train(model, fit_recs, val_recs, cfg.train, tz)
        report = evaluate(result.model, eval_recs, cfg.train.batch_size, tz)
    _emit(_report_record(f"baseline-{args.kind}", args.split, report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusion-eta",
                     description="Fusion RNN trip-time estimation toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic trip dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("preprocess", help="filter a dataset and report drops")
    p.add_argument("--in", dest="input", required=True, help="input JSONL path")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_preprocess)

    p = subs.add_parser("train", help="train a model and write checkpoint + logs")
    _add_config_flags(p)
    p.add_argument("--data", default=None, help="existing dataset JSONL "
                   "(generated from config when omitted)")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint, "
                   "metrics.jsonl, and report.json")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--tz-offset-s", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("count", help="parameter and multiplication counts "
                        "(closed-form and instrumented)")
    p.add_argument("--variant", default="all", choices=list(cells.VARIANTS) + ["all"])
    p.add_argument("--m", type=int, required=True, help="input size")
    p.add_argument("--n", type=int, required=True, help="hidden size")
    p.add_argument("--r", type=int, default=2, help="fusion rounds")
    p.add_argument("--seq-len", type=int, default=1)
    p.set_defaults(func=cmd_count)

    p = subs.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--variant", default="all",
                   choices=list(cells.VARIANTS) + ["model", "all"])
    p.add_argument("--r", type=int, default=2, help="fusion rounds")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("sweep-r", help="train fusion models across round counts")
    _add_config_flags(p)
    p.add_argument("--r-list", required=True, help="comma-separated round counts")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True, help="output table file (JSONL)")
    p.set_defaults(func=cmd_sweep_r)

    p = subs.add_parser("baseline", help="score a non-fusion reference predictor")
    _add_config_flags(p)
    p.add_argument("kind", choices=["route-eta", "mean", "ffn"])
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DivergenceError as exc:
        _emit({"error": "divergence", "message": str(exc)}, stream=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, DomainError, ValueError) as exc:
        _emit({"error": "validation", "message": str(exc)}, stream=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        _emit({"error": "io", "message": str(exc)}, stream=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
