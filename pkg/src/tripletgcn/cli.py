"""Command-line entry point: synth, train, eval, predict, baseline.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .baselines import densify, knn_score, scores_to_csv
from .config import ConfigError, extra, load_config, parse_overrides, synth_config, train_config
from .metrics import MetricsReport, evaluate, stratified_split, youden_threshold
from .model import NumericalError
from .preprocess import fit, transform
from .schema import Cohort, DataError, SchemaError, load_cohort, save_cohort
from .synth import CalibrationError, generate_with_truth, provenance_json
from .train import deterministic_blas, predict_proba, train

log = logging.getLogger("tripletgcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_data_args(p: argparse.ArgumentParser, labels: bool = True) -> None:
    p.add_argument("--data", type=Path, help="directory holding schema.json, triplets.csv, labels.csv")
    p.add_argument("--schema", type=Path)
    p.add_argument("--triplets", type=Path)
    if labels:
        p.add_argument("--labels", type=Path)
    p.add_argument("--patients", type=Path, help="JSON list mapping external patient keys to dense ids")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, fixed timestamps")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tripletgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train on a labeled cohort")
    _add_data_args(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="history CSV (default: <out>.history.csv)")
    p.add_argument("--split-out", type=Path, help="split JSON (default: <out>.split.json)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, help="split JSON; evaluates its test indices")
    p.add_argument("--threshold", type=float, help="override the checkpoint's threshold")
    p.add_argument("--json", type=Path, help="metrics JSON (default: <checkpoint>.metrics.json)")

    p = sub.add_parser("predict", parents=[common], help="score patients with a checkpoint")
    _add_data_args(p, labels=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="prediction CSV")

    p = sub.add_parser("baseline", parents=[common], help="KNN baseline metrics")
    _add_data_args(p)
    p.add_argument("--k", type=int)
    p.add_argument("--split", type=Path, help="split JSON from train; otherwise a fresh stratified split")
    p.add_argument("--scores", type=Path, help="write test-set scores CSV")
    p.add_argument("--json", type=Path, help="metrics JSON")
    return parser


# --------------------------------------------------------------------------


def _settings(args) -> dict:
    values = load_config(args.config, parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.deterministic:
        values["deterministic"] = True
    return values


def _data_paths(args, need_labels: bool) -> tuple[Path, Path, Optional[Path]]:
    schema, triplets = args.schema, args.triplets
    labels = getattr(args, "labels", None)
    if args.data is not None:
        schema = schema or args.data / "schema.json"
        triplets = triplets or args.data / "triplets.csv"
        if labels is None and need_labels:
            labels = args.data / "labels.csv"
        if args.patients is None and (args.data / "patients.json").exists():
            args.patients = args.data / "patients.json"
    if schema is None or triplets is None:
        raise UsageError("pass --data DIR or both --schema and --triplets")
    return schema, triplets, labels


def _load(args, need_labels: bool) -> Cohort:
    schema, triplets, labels = _data_paths(args, need_labels)
    for p in (schema, triplets, labels):
        if p is not None and not p.exists():
            raise DataError(f"no such file: {p}")
    cohort = load_cohort(schema, triplets, labels, patient_index_path=args.patients)
    if need_labels and cohort.labels is None:
        raise DataError("this command needs labels")
    return cohort


def _patient_ids(cohort: Cohort, idx) -> list:
    keys = cohort.patient_keys
    return [keys[i] if keys else int(i) for i in idx]


def _read_split(path: Path, n: int) -> dict[str, list[int]]:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from None
    if obj.get("n_patients") != n:
        raise DataError(f"split file is for {obj.get('n_patients')} patients, cohort has {n}")
    for key in ("train", "val", "test"):
        if not all(isinstance(i, int) and 0 <= i < n for i in obj.get(key, [])):
            raise DataError(f"split file has invalid {key} indices")
    return obj


def _report(probs, labels, threshold, values) -> MetricsReport:
    return evaluate(probs, labels, threshold, n_boot=extra(values, "n_boot"), seed=values.get("seed", 0))


def cmd_synth(args) -> int:
    values = _settings(args)
    config = synth_config(values)
    cohort, truth = generate_with_truth(config)
    save_cohort(cohort, args.out)
    (args.out / "provenance.json").write_text(provenance_json(config, truth), encoding="utf-8")
    print(f"wrote {cohort.n_patients} patients, {len(cohort.triplets)} triplets to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _settings(args)
    config = train_config(values)
    thr_mode = str(extra(values, "threshold"))
    cohort = _load(args, need_labels=True)
    y = np.asarray(cohort.labels)
    seed = config.seed

    train_all, test = stratified_split(y, extra(values, "test_fraction"), seed)
    val_fraction = extra(values, "val_fraction")
    if val_fraction > 0:
        fit_pos, val_pos = stratified_split(y[train_all], val_fraction, seed)
        fit_idx, val_idx = train_all[fit_pos], train_all[val_pos]
    else:
        fit_idx, val_idx = train_all, np.zeros(0, dtype=np.int64)

    params, stats, history = train(cohort, (fit_idx, val_idx), config)
    probs = predict_proba(cohort, stats, params, config)
    threshold = 0.5
    if thr_mode == "youden":
        if val_idx.size == 0:
            raise ConfigError("threshold = youden needs a validation split")
        threshold = youden_threshold(probs[val_idx], y[val_idx])
    else:
        threshold = float(thr_mode)

    ck = ckpt_io.Checkpoint(cohort.schema, stats, params, config, threshold)
    split = {
        "n_patients": cohort.n_patients,
        "seed": seed,
        "train": fit_idx.tolist(),
        "val": val_idx.tolist(),
        "test": test.tolist(),
    }
    history_path = args.history or args.out.with_name(args.out.name + ".history.csv")
    split_path = args.split_out or args.out.with_name(args.out.name + ".split.json")
    ckpt_io.save(ck, args.out)
    history_path.write_text(history.to_csv(), encoding="utf-8")
    split_path.write_text(json.dumps(split) + "\n", encoding="utf-8")

    print(f"trained {len(history)} epochs (best epoch {history.best_epoch}); checkpoint {args.out}")
    if val_idx.size:
        print("validation metrics:")
        print(_report(probs[val_idx], y[val_idx], threshold, values).to_table("Triplet-GCN"), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    values = _settings(args)
    cohort = _load(args, need_labels=True)
    ck = ckpt_io.load(args.checkpoint, expect_schema=cohort.schema)
    idx = np.arange(cohort.n_patients)
    if args.split:
        idx = np.asarray(_read_split(args.split, cohort.n_patients)["test"], dtype=np.int64)
    threshold = ck.threshold if args.threshold is None else args.threshold
    values.setdefault("seed", ck.train_config.seed)
    with deterministic_blas(values.get("deterministic", False)):
        probs = predict_proba(cohort, ck.stats, ck.params, ck.train_config)
    report = _report(probs[idx], np.asarray(cohort.labels)[idx], threshold, values)
    out = args.json or args.checkpoint.with_name(args.checkpoint.name + ".metrics.json")
    out.write_text(report.to_json(), encoding="utf-8")
    print(report.to_table("Triplet-GCN"), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    values = _settings(args)
    cohort = _load(args, need_labels=False)
    ck = ckpt_io.load(args.checkpoint, expect_schema=cohort.schema)
    with deterministic_blas(values.get("deterministic", False)):
        probs = predict_proba(cohort, ck.stats, ck.params, ck.train_config)
    args.out.write_text(scores_to_csv(_patient_ids(cohort, range(cohort.n_patients)), probs), encoding="utf-8")
    print(f"wrote {cohort.n_patients} predictions to {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    values = _settings(args)
    config = train_config(values)
    k = args.k if args.k is not None else extra(values, "k")
    cohort = _load(args, need_labels=True)
    y = np.asarray(cohort.labels)
    if args.split:
        split = _read_split(args.split, cohort.n_patients)
        train_idx = np.asarray(sorted(split["train"] + split["val"]), dtype=np.int64)
        test = np.asarray(split["test"], dtype=np.int64)
    else:
        train_idx, test = stratified_split(y, extra(values, "test_fraction"), config.seed)
    stats = fit(cohort, train_idx, config.stats_after_impute)
    design = densify(transform(cohort, stats))
    scores = knn_score(design.rows(train_idx), y[train_idx], design.rows(test), k)
    thr = extra(values, "threshold")
    threshold = 0.5 if thr == "youden" else float(thr)
    report = _report(scores, y[test], threshold, values)
    if args.scores:
        args.scores.write_text(scores_to_csv(_patient_ids(cohort, test), scores), encoding="utf-8")
    if args.json:
        args.json.write_text(report.to_json(), encoding="utf-8")
    print(report.to_table(f"KNN (k={k})"), end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help and usage errors; return the code instead of unwinding the caller
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with deterministic_blas(args.deterministic):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, ckpt_io.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, CalibrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
