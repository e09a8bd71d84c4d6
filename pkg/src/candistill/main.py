"""Command-line entry points for candistill"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Optional, Sequence

from .canio import dataset_hash, read_log
from .config import ATTACK_CHOICES, PRESETS, RunConfig, load_run_config
from .errors import CanDistillError, ConfigError
from .evaluation import METRIC_NAMES, MetricsReport, format_percent
from .numerics import debug_checks
from .pipeline import (
    cmd_compare,
    cmd_distill,
    cmd_evaluate,
    cmd_preprocess,
    cmd_simulate,
    cmd_train_student,
    cmd_train_teacher,
)
from .student import STUDENT_KINDS

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: str = "INFO", debug: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if debug else getattr(logging, level.upper()), format=LOG_FORMAT)


def _hex_int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r} (use 0x prefix for hex)")


def _payload(text: str) -> tuple[int, ...]:
    try:
        return tuple(bytes.fromhex(text.replace(",", " ")))
    except ValueError:
        raise argparse.ArgumentTypeError(f"payload must be hex bytes, got {text!r}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("global options")
    group.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    group.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset (default: desk)")
    group.add_argument("--seed", type=int, help="random seed (non-negative integer)")
    group.add_argument("--out", help="output directory (default: runs/<name>)")
    group.add_argument("--name", help="record name under runs/")
    group.add_argument("--threads", type=int, help="worker threads for parsing and inference")
    group.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config value, e.g. --set teacher.epochs=5",
    )
    group.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    group.add_argument("--debug", action="store_true", help="verbose logging and NaN/Inf checks")
    return common


def _dataset_options(parser: argparse.ArgumentParser, split: bool = True) -> None:
    parser.add_argument("--dataset", help="labelled CAN log or a preprocessed directory")
    if split:
        parser.add_argument("--train-ratio", type=float, help="train fraction when splitting a single log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="candistill",
        description="CAN intrusion detection with a transformer teacher distilled into light students",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = [_common_options()]

    p = sub.add_parser("simulate", parents=common, help="generate a labelled synthetic CAN log")
    p.add_argument("--attack", choices=ATTACK_CHOICES, help="attack to inject (default: dos)")
    p.add_argument("--duration", type=float, help="log length in seconds")
    p.add_argument("--rate", type=float, help="injected frames per second")
    p.add_argument("--attack-fraction", type=float, help="target share of attack frames; overrides --rate")
    p.add_argument(
        "--window", type=float, nargs=2, metavar=("START", "END"), help="injection window in seconds"
    )
    p.add_argument("--inject-id", type=_hex_int, help="DoS identifier (default 0x000)")
    p.add_argument("--target-id", type=_hex_int, help="spoofed identifier")
    p.add_argument("--payload", type=_payload, help="forged spoof payload as hex bytes")

    p = sub.add_parser("preprocess", parents=common, help="split a log into train.csv and test.csv")
    _dataset_options(p)
    p.add_argument("--strict", action="store_true", help="fail on the first malformed record")

    p = sub.add_parser("train-teacher", parents=common, help="train the transformer teacher")
    _dataset_options(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-student", parents=common, help="train a student with cross-entropy only")
    _dataset_options(p)
    p.add_argument("--student", choices=STUDENT_KINDS)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("distill", parents=common, help="train a student against the teacher")
    _dataset_options(p)
    p.add_argument("--teacher", help="teacher checkpoint or record directory")
    p.add_argument("--student", choices=STUDENT_KINDS)
    p.add_argument("--temperature", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", parents=common, help="score a checkpoint on a labelled log")
    _dataset_options(p, split=False)
    p.add_argument("--model", help="checkpoint file or record directory")
    p.add_argument("--split", choices=["train", "test"], help="file to use when --dataset is a directory")

    p = sub.add_parser("compare", parents=common, help="compare records against a baseline")
    p.add_argument("records", nargs="+", help="record directories holding metrics.json")
    p.add_argument("--baseline", help="record to diff against (default: the first)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return parser


def _section(**values: Any) -> dict[str, Any]:
    return {key: value for key, value in values.items() if value is not None}


def flags_from_args(args: argparse.Namespace) -> dict[str, Any]:
    """Command-line values that were given, shaped like a config file"""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    flags = _section(
        seed=args.seed,
        out=args.out,
        name=args.name,
        threads=args.threads,
        dataset=get("dataset"),
        train_ratio=get("train_ratio"),
        teacher_checkpoint=get("teacher"),
        model=get("model"),
        eval_split=get("split"),
        strict=True if get("strict") else None,
    )
    if args.command == "simulate":
        sim = _section(
            attack=args.attack,
            duration=args.duration,
            rate=args.rate,
            attack_fraction=args.attack_fraction,
            window=tuple(args.window) if args.window else None,
            inject_id=args.inject_id,
            target_id=args.target_id,
            payload=args.payload,
        )
        if sim:
            flags["simulate"] = sim
    epochs_section = "teacher" if args.command == "train-teacher" else "student"
    student = _section(kind=get("student"))
    if get("epochs") is not None:
        flags[epochs_section] = {"epochs": args.epochs}
    if student:
        flags.setdefault("student", {}).update(student)
    distill = _section(temperature=get("temperature"), alpha=get("alpha"))
    if distill:
        flags["distill"] = distill
    return flags


def format_report(report: MetricsReport) -> str:
    cm = report.confusion
    values = "  ".join(f"{name.upper()} {format_percent(getattr(report, name))}" for name in METRIC_NAMES)
    return f"{values}  (tp={cm.tp} tn={cm.tn} fp={cm.fp} fn={cm.fn})"


def run_command(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.preset, flags_from_args(args), args.assignments)
    with debug_checks(args.debug):
        _dispatch(args, config)
    return 0


def _dispatch(args: argparse.Namespace, config: RunConfig) -> None:
    if args.command == "simulate":
        log = cmd_simulate(config)
        print(json.dumps(log.manifest.to_dict(), sort_keys=True))
    elif args.command == "preprocess":
        print(json.dumps(cmd_preprocess(config), indent=2, sort_keys=True))
    elif args.command in ("train-teacher", "train-student", "distill"):
        runner = {
            "train-teacher": cmd_train_teacher,
            "train-student": cmd_train_student,
            "distill": cmd_distill,
        }
        report = runner[args.command](config)
        print(format_report(report))
    elif args.command == "evaluate":
        report, latency = cmd_evaluate(config)
        print(format_report(report))
        print(f"latency: {latency:.2f} us/frame")
    elif args.command == "compare":
        comparison = cmd_compare(config, args.records, args.baseline)
        if args.json:
            print(json.dumps(comparison.to_dict(), indent=2, sort_keys=True))
        else:
            print(comparison.render())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level, args.debug)

    try:
        return run_command(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CanDistillError, OSError, FloatingPointError) as e:
        if args.debug:
            logger.exception("%s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return 1


def inspect_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse a CAN log and print what was found, without training anything"""
    parser = argparse.ArgumentParser(prog="candistill-inspect", description="Inspect a CAN log")
    parser.add_argument("log", type=Path, help="HCRL-style or canonical CSV log")
    parser.add_argument("--top", type=int, default=10, help="identifiers to list")
    parser.add_argument("--debug", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging("WARNING", args.debug)

    try:
        parsed = read_log(args.log)
    except (CanDistillError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    frames = parsed.frames
    print(f"\n=== {args.log} ===\n")
    print(f"  frames:   {len(frames)}")
    print(f"  skipped:  {len(parsed.skipped)}")
    for error in parsed.skipped[:5]:
        print(f"    {error}")
    if frames:
        attack = sum(int(f.label) for f in frames)
        print(f"  normal:   {len(frames) - attack}")
        print(f"  attack:   {attack}")
        print(f"  span:     {frames[0].timestamp:.6f} .. {frames[-1].timestamp:.6f} s")
        print(f"  hash:     {dataset_hash(frames)}")
        print("\n  busiest identifiers:")
        for can_id, count in Counter(f.can_id for f in frames).most_common(args.top):
            print(f"    0x{can_id:03X}  {count}")
    print()
    return 0
