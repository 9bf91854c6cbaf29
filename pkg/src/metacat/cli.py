"""Command-line entry point.

Subcommands cover the full workflow: synthesize or ingest response data,
build cross-validation folds, train a checkpoint, fit the plain IRT
baseline, evaluate policies, run the selection analyses, and serve the
adaptive-session API. Exit codes: 0 success, 1 runtime/numeric failure,
2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoints, evaluation
from .data import (folds_from_json, folds_to_json, generate_synthetic,
                   ingest_csv, make_eval_partitions, make_folds, save_truth)
from .errors import MetacatError, ValidationError
from .models import fit_irt_mle
from .training import TrainConfig, train

_FLAG_TYPES = {"int": int, "float": float, "str": str}


def _echo(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _truth_sidecar(output) -> Path:
    out = Path(output)
    return out.with_suffix(out.suffix + ".truth.json") \
        if out.suffix != ".csv" else out.with_suffix(".truth.json")


def _load_dataset(path):
    # canonical input produced by synth/ingest: keep every student, the
    # response-count filter already ran at ingest time
    _require_file(path, "data file")
    return ingest_csv(path, min_responses=1)


def cmd_synth(args) -> int:
    dataset, thetas, difficulties = generate_synthetic(
        args.students, args.questions, args.seed, args.param_seed)
    dataset.to_csv(args.output)
    truth = _truth_sidecar(args.output)
    save_truth(truth, thetas, difficulties)
    _echo({"command": "synth", "students": args.students,
           "questions": args.questions, "seed": args.seed,
           "rows": args.students * args.questions,
           "output": str(args.output), "truth": str(truth)})
    return 0


def cmd_ingest(args) -> int:
    _require_file(args.input, "input file")
    dataset = ingest_csv(args.input, min_responses=args.min_responses)
    dataset.to_csv(args.output)
    _echo({"command": "ingest", "input": str(args.input),
           "output": str(args.output), "students": dataset.num_students,
           "questions": dataset.num_questions,
           "responses": int(sum(dataset.num_responses(s)
                                for s in dataset.student_ids))})
    return 0


def cmd_folds(args) -> int:
    dataset = _load_dataset(args.data)
    folds = make_folds(dataset, args.seed, num_folds=args.num_folds)
    folds_to_json(folds, args.output)
    _echo({"command": "folds", "data": str(args.data), "seed": args.seed,
           "num_folds": args.num_folds, "output": str(args.output)})
    return 0


def _train_config(args) -> TrainConfig:
    merged = {}
    if args.config:
        _require_file(args.config, "config file")
        merged.update(json.loads(Path(args.config).read_text()))
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            merged[f.name] = value
    return TrainConfig.from_dict(merged)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    if args.folds:
        _require_file(args.folds, "folds file")
        fold = folds_from_json(args.folds)[args.fold]
    else:
        fold = make_folds(dataset, cfg.seed)[args.fold]
    _echo({"command": "train", "fold": fold.fold_index,
           "effective_config": dataclasses.asdict(cfg)})
    best, history = train(dataset, fold, cfg, log_path=args.log)
    checkpoints.save_checkpoint(args.out, best)
    _echo({"command": "train", "epochs_run": len(history),
           "best_epoch": best["epoch"],
           "best_val_accuracy": best["val_accuracy"],
           "checkpoint": str(args.out)})
    return 0


def cmd_fit_irt(args) -> int:
    dataset = _load_dataset(args.data)
    students = None
    if args.folds:
        _require_file(args.folds, "folds file")
        students = folds_from_json(args.folds)[args.fold].train
    fit = fit_irt_mle(dataset, students=students, lam1=args.lam1)
    payload = {
        "difficulties": fit.difficulties.tolist(),
        "abilities": {sid: float(v) for sid, v in fit.abilities.items()},
        "prior_mean": fit.prior_mean,
        "lam1": fit.lam1,
        "sweeps": fit.sweeps,
        "question_ids": list(dataset.question_ids),
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2))
    _echo({"command": "fit-irt", "students": len(fit.abilities),
           "sweeps": fit.sweeps, "output": str(args.out)})
    return 0


def _parse_n_list(text: str):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"bad n list {text!r}: {exc}") from exc


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    dataset = _load_dataset(args.data)
    payload = checkpoints.load_checkpoint(args.checkpoint)
    if args.folds:
        _require_file(args.folds, "folds file")
        fold = folds_from_json(args.folds)[args.fold]
    else:
        fold = make_folds(dataset, args.seed)[args.fold]
    students = fold.val if args.split == "val" else fold.test
    n_list = _parse_n_list(args.n_list)
    parts = make_eval_partitions(dataset, students, args.repeats, args.seed)
    report, selections = evaluation.eval_policy(
        dataset, payload, students, parts, n_list, workers=args.workers)
    report["method"] = payload["config"]["policy"]
    report["model"] = payload["model_kind"]
    report["fold"] = fold.fold_index
    evaluation.emit_report(report, args.report, "json")
    if args.csv:
        rows = evaluation.metrics_rows(report, report["method"],
                                       fold.fold_index)
        evaluation.emit_report(
            {"rows": rows, "columns": ["method", "n", "fold", "accuracy",
                                       "accuracy_std", "auc", "auc_std"]},
            args.csv, "csv")
    if args.selections:
        Path(args.selections).write_text(json.dumps(
            evaluation.selections_to_json(selections), sort_keys=True))
    _echo({"command": "eval", "method": report["method"],
           "per_n": {str(n): report["per_n"][n]["accuracy"]
                     for n in n_list},
           "report": str(args.report)})
    return 0


def _load_selections(path):
    _require_file(path, "selections file")
    return evaluation.selections_from_json(
        json.loads(Path(path).read_text()))


def cmd_analyze(args) -> int:
    if args.kind == "mi":
        dataset = _load_dataset(args.data)
        per_method = {}
        for spec_ in args.selections:
            if "=" not in spec_:
                raise ValidationError(
                    f"--selections needs name=path, got {spec_!r}")
            name, path = spec_.split("=", 1)
            per_method[name] = list(_load_selections(path).values())
        report = evaluation.mi_analysis(dataset, per_method)
    elif args.kind == "exposure":
        sels = list(_load_selections(args.selections[0].split("=")[-1])
                    .values())
        trimmed = [s[:args.n] for s in sels]
        report = evaluation.exposure_and_overlap(
            trimmed, args.questions, args.n, seed=args.seed)
    elif args.kind == "ability":
        _require_file(args.irt, "IRT fit file")
        dataset = _load_dataset(args.data)
        irt = json.loads(Path(args.irt).read_text())
        selections = _load_selections(args.selections[0].split("=")[-1])
        report = evaluation.ability_error_study(
            dataset, selections, np.array(irt["difficulties"]),
            _parse_n_list(args.n_list), lam2=args.lam2,
            prior_mean=irt["prior_mean"])
    else:  # unreachable via argparse choices
        raise ValidationError(f"unknown analysis kind {args.kind!r}")
    evaluation.emit_report(report, args.report, "json")
    _echo({"command": "analyze", "kind": args.kind,
           "report": str(args.report)})
    return 0


def cmd_serve(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    from . import service
    import uvicorn
    app = service.create_app(
        checkpoint_path=args.checkpoint, log_dir=args.log_dir,
        n_max=args.n_max, lam2=args.lam2, capacity=args.capacity,
        seed=args.seed)
    _echo({"command": "serve", "host": args.host, "port": args.port,
           "checkpoint": str(args.checkpoint)})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metacat",
        description="Learned adaptive testing: data prep, training, "
                    "evaluation, analysis, and serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic response CSV")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--questions", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param-seed", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="clean a raw response CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-responses", type=int, default=20)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("folds", help="write cross-validation folds")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-folds", type=int, default=5)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train a selection policy checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="JSON file with training-config keys")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="JSON-lines epoch log")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, type=_FLAG_TYPES.get(str(f.type), str),
                       default=None, help=f"override {f.name}")
    p.add_argument("--n", dest="n_questions", type=int, default=None,
                   help="alias for --n-questions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-irt", help="joint MLE ability/difficulty fit")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--lam1", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_irt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out "
                                    "students")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--split", choices=["test", "val"], default="test")
    p.add_argument("--n-list", default="1,3,5,10")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--selections", default=None,
                   help="also dump per-student selections as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="selection-behavior studies")
    p.add_argument("--kind", choices=["mi", "exposure", "ability"],
                   required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--selections", nargs="+", default=[],
                   help="name=path selection files (mi) or one path")
    p.add_argument("--questions", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n-list", default="1,3,5,10")
    p.add_argument("--lam2", type=float, default=1.0)
    p.add_argument("--irt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="run the adaptive-session HTTP API")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--lam2", type=float, default=1.0)
    p.add_argument("--capacity", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MetacatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
