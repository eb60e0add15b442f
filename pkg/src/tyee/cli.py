"""Command-line entry points: run, preprocess, evaluate, inspect.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
error. Human-readable causes go to stderr; final reports go to stdout and
into the run's output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, Override, apply_overrides, parse_config, validate
from .dataset import SplitSpec, build_dataset, split
from .errors import ConfigError, DataError, TyeeError
from .signal_io import detect_format, read_record
from .trainer import evaluate_split, fit, init_task, load_checkpoint, logger

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_TRAINING


def _fail(exc: Exception, phase: str) -> int:
    print(f"error ({phase}): {exc}", file=sys.stderr)
    return _exit_code(exc) if isinstance(exc, TyeeError) else EXIT_TRAINING


def _setup_logging(level_name: str) -> None:
    level = getattr(logging, level_name.upper(), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("tyee")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _load_config(args) -> ExperimentConfig:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    config = parse_config(text)
    overrides = [Override.parse(o) for o in (args.override or [])]
    if getattr(args, "seed", None) is not None:
        overrides.append(Override("common.seed", args.seed))
    return apply_overrides(config, overrides)


def _validated_config(args) -> ExperimentConfig:
    config = _load_config(args)
    issues = validate(config)
    if issues:
        for issue in issues:
            print(f"config error: {issue}", file=sys.stderr)
        raise ConfigError(f"{len(issues)} validation issue(s)")
    _setup_logging(config["common"]["log_level"])
    if config["distributed"]:
        logger.warning("distributed section is accepted but ignored (single-process run)")
    return config


def _write_report(path: Path, values: dict, aggregate) -> None:
    lines = [f"{name}\t{value!r}" for name, value in values.items()]
    if aggregate is not None:
        lines.append(f"aggregate\t{aggregate!r}")
    text = "\n".join(lines) + "\n"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    print(text, end="")


def _best_entry(history: list[dict], select_by: str) -> dict | None:
    scored = []
    for entry in history:
        if entry["epoch"] < 0:
            continue
        if select_by == "loss":
            loss = entry["valid_loss"] if entry["valid_loss"] is not None else entry["train_loss"]
            score = -loss
        elif entry["aggregate"] is not None:
            score = entry["aggregate"]
        else:
            score = -entry["train_loss"]
        scored.append((score, entry))
    if not scored:
        return None
    best = max(range(len(scored)), key=lambda i: (scored[i][0], -i))
    return scored[best][1]


def cmd_run(args) -> int:
    try:
        config = _validated_config(args)
    except TyeeError as exc:
        return _fail(exc, "config")

    out_dir = Path(config["common"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(config.to_yaml())

    try:
        dataset = build_dataset(config["dataset"])
        split_cfg = config["dataset"]["split"]
        parts = split(dataset, SplitSpec(split_cfg["mode"], tuple(split_cfg["fractions"]),
                                         split_cfg["seed"]))
    except TyeeError as exc:
        return _fail(exc, "data")

    try:
        task = init_task(config.data, dataset, parts)
    except TyeeError as exc:
        return _fail(exc, "config")

    trainer_cfg = config["trainer"]
    try:
        history = fit(
            task,
            epochs=trainer_cfg["epochs"],
            checkpoint_interval=trainer_cfg["checkpoint_interval"],
            out_dir=out_dir,
            resume_from=args.resume,
            eval_initial=trainer_cfg["eval_initial"],
        )
    except Exception as exc:
        return _fail(exc, "training")

    best = _best_entry(history, task.select_by)
    if best is None:
        print("no epochs ran; nothing to report", file=sys.stderr)
        return EXIT_OK
    _write_report(out_dir / "report", best["metrics"], best["aggregate"])
    return EXIT_OK


def cmd_preprocess(args) -> int:
    try:
        config = _validated_config(args)
    except TyeeError as exc:
        return _fail(exc, "config")
    section = config["dataset"]
    if not (section.get("cache_dir") or os.environ.get("TYEE_CACHE_DIR")):
        print("error (config): preprocess needs dataset.cache_dir or TYEE_CACHE_DIR",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset = build_dataset(section)
        for i in range(len(dataset)):  # verify every cached block's digest
            dataset[i]
    except TyeeError as exc:
        return _fail(exc, "data")
    for info in dataset.build_info:
        status = "hit" if info.cache_hit else "built"
        print(f"{info.record_id}\twindows {info.windows}\t{status}\t{info.cache_key}")
    print(f"total samples: {len(dataset)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        config = _validated_config(args)
    except TyeeError as exc:
        return _fail(exc, "config")
    try:
        dataset = build_dataset(config["dataset"])
        split_cfg = config["dataset"]["split"]
        parts = split(dataset, SplitSpec(split_cfg["mode"], tuple(split_cfg["fractions"]),
                                         split_cfg["seed"]))
    except TyeeError as exc:
        return _fail(exc, "data")
    try:
        task = init_task(config.data, dataset, parts)
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.model_meta != task.model.meta():
            from .errors import ShapeMismatch

            raise ShapeMismatch(
                f"checkpoint model {ckpt.model_meta} incompatible with configured model"
            )
        task.model.set_params(ckpt.params)
    except TyeeError as exc:
        return _fail(exc, "evaluate")

    out_dir = Path(config["common"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    try:
        for name, indices in (("valid", task.valid_indices), ("test", task.test_indices)):
            report, loss = evaluate_split(task, indices)
            if report is None:
                continue
            results[name] = (report, loss)
            print(f"[{name}] loss {loss!r}")
            for metric, value in report.values.items():
                print(f"[{name}] {metric}\t{value!r}")
            print(f"[{name}] aggregate\t{report.aggregate!r}")
    except TyeeError as exc:
        return _fail(exc, "evaluate")
    if not results:
        print("no valid or test samples to evaluate", file=sys.stderr)
        return EXIT_DATA
    payload = {
        name: {"loss": loss, **report.as_dict()} for name, (report, loss) in results.items()
    }
    (out_dir / "eval_report").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        if path.is_dir():
            return _inspect_cache(path)
        fmt = detect_format(path)
        record = read_record(path, format=fmt, sampling_rate=args.rate)
        print(f"record {record.record_id}  subject {record.subject_id}  format {fmt}")
        print(f"start {record.start_time.isoformat()}  duration {record.duration:.6g} s")
        print(f"{len(record.channels)} channel(s), {len(record.annotations)} annotation(s)")
        print("label\tunit\trate_hz\tsamples\tphys_range")
        for ch, data in zip(record.channels, record.data):
            print(
                f"{ch.label}\t{ch.physical_unit or '-'}\t{ch.sampling_rate:g}"
                f"\t{len(data)}\t[{ch.physical_min:g}, {ch.physical_max:g}]"
            )
        return EXIT_OK
    except TyeeError as exc:
        print(f"error (inspect): {exc}", file=sys.stderr)
        return EXIT_DATA


def _inspect_cache(path: Path) -> int:
    manifests = []
    if (path / "manifest.json").exists():
        manifests = [path / "manifest.json"]
    else:
        manifests = sorted(path.glob("*/manifest.json"))
    if not manifests:
        print(f"error (inspect): {path} is not a record file or cache directory",
              file=sys.stderr)
        return EXIT_DATA
    total = 0
    for manifest_path in manifests:
        meta = json.loads(manifest_path.read_text())
        total += meta["sample_count"]
        print(
            f"{meta['key'][:16]}...\trecord {meta['record_id']}\tsubject {meta['subject_id']}"
            f"\tsamples {meta['sample_count']}\tshape {meta['shape']}"
        )
    print(f"{len(manifests)} entr{'y' if len(manifests) == 1 else 'ies'}, {total} samples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tyee",
                                     description="Config-driven physiological-signal experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p, seed=True):
        p.add_argument("--config", required=True, help="path to the experiment YAML")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable; later ones win")
        if seed:
            p.add_argument("--seed", type=int, help="shorthand for common.seed")

    run = sub.add_parser("run", help="train end to end and write a report")
    add_config_args(run)
    run.add_argument("--resume", help="checkpoint to resume from")
    run.set_defaults(func=cmd_run)

    pre = sub.add_parser("preprocess", help="populate the sample cache only")
    add_config_args(pre)
    pre.set_defaults(func=cmd_preprocess)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on valid/test splits")
    add_config_args(ev)
    ev.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    ev.set_defaults(func=cmd_evaluate)

    ins = sub.add_parser("inspect", help="summarize a record file or cache directory")
    ins.add_argument("path")
    ins.add_argument("--rate", type=float, default=None,
                     help="sampling rate for CSV files (they carry none)")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _setup_logging("info")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TyeeError as exc:
        return _fail(exc, args.command)


if __name__ == "__main__":
    sys.exit(main())
