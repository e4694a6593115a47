"""Command-line interface: gen-data, train, eval, ablate.

Exit codes: 0 success, 2 invalid flags/config/checkpoint, 3 I/O failure,
4 training diverged (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import DataError, generate_dataset, load_pair_dir
from .evaluate import METRIC_NAMES, ablate, evaluate_params, format_ablation_table
from .train import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    config_from_dict,
    load_checkpoint,
    run,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _seed_list(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("expected a comma-separated list of seeds")
    try:
        return [int(p) for p in parts]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}: {e}") from e


def _load_config(path_str: str) -> TrainConfig:
    path = Path(path_str)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    updates = {}
    if getattr(args, "labeled_frac", None) is not None:
        updates["labeled_fraction"] = args.labeled_frac
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    return dataclasses.replace(config, **updates) if updates else config


def _resolve_eval_dir(data_dir: Path) -> Path:
    """Accept either a split directory (with images/) or a dataset root (use test/)."""
    if (data_dir / "images").is_dir():
        return data_dir
    if (data_dir / "test" / "images").is_dir():
        return data_dir / "test"
    raise DataError(f"{data_dir}: no images/ here and no test/images/ below it")


def _metrics_line(summary: dict) -> str:
    return "  ".join(f"{name} {summary[name]:.4f}" for name in METRIC_NAMES)


def _cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.out, args.count, args.size, args.seed, args.contrast)
    print(manifest)
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    result = run(config, args.data, args.out)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"labeled {result.metrics['n_labeled']}  unlabeled {result.metrics['n_unlabeled']}")
    for split_name in ("val", "test"):
        if split_name in result.metrics:
            print(f"{split_name}: {_metrics_line(result.metrics[split_name])}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    samples = [s for s in load_pair_dir(_resolve_eval_dir(Path(args.data))) if s.labeled]
    record = evaluate_params(ckpt.params, samples)
    print(_metrics_line(record.summary()))
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {**record.summary(), "n_images": len(record.per_image)}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    report = ablate(config, args.data, args.seeds, args.out, verbose=True)
    print(format_ablation_table(report), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mspa",
        description="Semi-supervised binary segmentation via mutual/self prototype alignment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/val/test dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="total samples across splits")
    p.add_argument("--size", type=int, required=True, help="square image size (multiple of 4)")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--contrast", type=float, default=0.25, help="foreground intensity offset")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True, help="JSON config file (flags override its values)")
    p.add_argument("--data", required=True, help="dataset root (train/, optional val/ and test/)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--labeled-frac", type=float, help="override labeled_fraction")
    p.add_argument("--seed", type=int, help="override seed")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled samples")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="split directory or dataset root (uses test/)")
    p.add_argument("--out", help="directory for metrics.json (default: checkpoint directory)")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("ablate", help="run the four-row loss ablation across seeds")
    p.add_argument("--config", required=True, help="JSON config file (flags override its values)")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--seeds", type=_seed_list, required=True, help='comma-separated, e.g. "1,2,3"')
    p.add_argument("--out", required=True, help="output directory for the report and runs")
    p.add_argument("--labeled-frac", type=float, help="override labeled_fraction")
    p.set_defaults(handler=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
