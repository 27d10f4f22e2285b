"""
Command-line interface.

    headswap [--config FILE] [--set KEY=VALUE ...] [--log-level LEVEL] [--log-file FILE] COMMAND

Commands: gen-data, train-aligner, train-blender, swap, evaluate. Configuration is layered
as file < HEADSWAP_* environment < --set < command flags. Exit codes: 0 ok, 2 bad
configuration or arguments, 3 provider failure, 4 numeric failure, 1 anything else.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .checkpoint import Checkpoint, stage_config_hash
from .config import HeadSwapConfig, deep_merge, load_config, parse_assignments
from .exceptions import HeadSwapError, InvalidArgumentError
from .imagecore import Image, Mask, load_image, save_image, save_mask
from .logs import configure_logging
from .pipeline import SwapModels, evaluate, swap
from .segmentation import RegistrySegmenter, SegMap, load_segmap, save_segmap, write_taxonomy_manifest
from .synthetic import SyntheticDataset, gen_synthetic
from .training import train_aligner, train_blender

logger = logging.getLogger(__name__)

# command flag -> config key
_FLAG_KEYS = {
    "n_pairs": "data.n_pairs",
    "seed": "data.seed",
    "resolution": "data.resolution",
    "workers": "data.workers",
    "iterations": "train.iterations",
    "batch_size": "train.batch_size",
    "run_dir": "train.run_dir",
    "device": "train.device",
    "postprocess": "swap.postprocess",
    "max_pairs": "eval.max_pairs",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headswap", description="Two-stage head swapping")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration key, e.g. train.lr_g=2e-4")
    parser.add_argument("--log-level", choices=["off", "error", "warn", "info", "debug", "trace"])
    parser.add_argument("--log-file")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Render a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-pairs", dest="n_pairs", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--resolution", type=int)
    gen.add_argument("--workers", type=int)

    for name in ("train-aligner", "train-blender"):
        train = sub.add_parser(name, help=f"Train the {name.split('-')[1]} stage")
        train.add_argument("--data", required=True, help="Dataset directory from gen-data")
        train.add_argument("--run-dir", dest="run_dir")
        train.add_argument("--iterations", type=int)
        train.add_argument("--batch-size", dest="batch_size", type=int)
        train.add_argument("--device")
        train.add_argument("--resume", help="Checkpoint to continue from")
        train.add_argument("--force", action="store_true", help="Accept a config hash mismatch on --resume")
        train.add_argument("--progress", action="store_true")

    sw = sub.add_parser("swap", help="Swap the source head onto the target image")
    sw.add_argument("--source", required=True)
    sw.add_argument("--target", required=True)
    sw.add_argument("--target-seg", dest="target_seg", required=True, help="SegMap PNG of the target")
    sw.add_argument("--reenacted-seg", dest="reenacted_seg", help="SegMap PNG of the reenacted head")
    sw.add_argument("--aligner", required=True)
    sw.add_argument("--blender", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--artifacts", help="Directory receiving the intermediate products")
    sw.add_argument("--postprocess", action="store_true", default=None)
    sw.add_argument("--force", action="store_true")

    ev = sub.add_parser("evaluate", help="Evaluate checkpoints on a synthetic dataset")
    ev.add_argument("--data", required=True)
    ev.add_argument("--aligner", required=True)
    ev.add_argument("--blender", required=True)
    ev.add_argument("--out", required=True, help="Directory for metrics.csv and summary.json")
    ev.add_argument("--max-pairs", dest="max_pairs", type=int)
    ev.add_argument("--force", action="store_true")
    ev.add_argument("--progress", action="store_true")
    return parser


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides from the command flags that were given."""
    assignments = [
        f"{key}={json.dumps(getattr(args, flag))}"
        for flag, key in _FLAG_KEYS.items()
        if getattr(args, flag, None) is not None
    ]
    return parse_assignments(assignments)


def resolve_config(args: argparse.Namespace) -> HeadSwapConfig:
    overrides = deep_merge(parse_assignments(args.assignments), flag_overrides(args))
    if args.log_level:
        overrides["log_level"] = args.log_level
    if args.log_file:
        overrides["log_file"] = args.log_file
    return load_config(args.config, overrides=overrides)


def _load_resume(path: Optional[str], config: HeadSwapConfig, stage: str, force: bool) -> Optional[Checkpoint]:
    if not path:
        return None
    return Checkpoint.load(path, expected_hash=stage_config_hash(config, stage), stage=stage, force=force)


def _dataset(path: str, config: HeadSwapConfig) -> SyntheticDataset:
    dataset = SyntheticDataset.load(path)
    if dataset.resolution != config.aligner.resolution:
        raise InvalidArgumentError(
            f"Dataset resolution {dataset.resolution} differs from aligner.resolution {config.aligner.resolution}",
            "data",
        )
    return dataset


def save_artifacts(artifacts: Dict[str, Any], directory: Path) -> None:
    """Write every image, mask and segmentation of a swap's artifact bundle."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in artifacts.items():
        if isinstance(value, Image):
            save_image(value, directory / f"{name}.png")
        elif isinstance(value, Mask):
            save_mask(value, directory / f"{name}.png")
        elif isinstance(value, SegMap):
            save_segmap(value, directory / f"{name}.png")
        elif name == "operands":
            save_artifacts(value, directory / "operands")
        elif name == "masks":
            save_artifacts({f.name: getattr(value, f.name) for f in fields(value)}, directory / "masks")
        elif name == "provenance":
            (directory / "provenance.json").write_text(json.dumps(value, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args: argparse.Namespace, config: HeadSwapConfig) -> int:
    data = config.data
    dataset = gen_synthetic(data.n_pairs, data.resolution, data.seed, data.workers, progress=True)
    out = dataset.save(args.out)
    write_taxonomy_manifest(out / "taxonomy.json")
    print(f"Wrote {len(dataset)} pairs to {out}")
    return 0


def cmd_train(args: argparse.Namespace, config: HeadSwapConfig) -> int:
    dataset = _dataset(args.data, config)
    run_dir = args.run_dir or config.train.run_dir
    if args.command == "train-aligner":
        resume = _load_resume(args.resume, config, "aligner", args.force)
        checkpoint = train_aligner(config, dataset, run_dir=run_dir, resume=resume, progress=args.progress)
    else:
        resume = _load_resume(args.resume, config, "blender", args.force)
        checkpoint = train_blender(config, dataset, run_dir=run_dir, resume=resume, progress=args.progress)
    print(f"Trained {checkpoint.stage} for {checkpoint.iteration} iterations; checkpoint in {run_dir}")
    return 0


def cmd_swap(args: argparse.Namespace, config: HeadSwapConfig) -> int:
    models = SwapModels.from_checkpoints(config, args.aligner, args.blender, force=args.force)
    source = load_image(args.source)
    target = load_image(args.target)
    segmenter = RegistrySegmenter()
    segmenter.register(target, load_segmap(args.target_seg))
    reenacted_seg = load_segmap(args.reenacted_seg) if args.reenacted_seg else None
    output = swap(source, target, models, config=config, segmenter=segmenter, reenacted_segmap=reenacted_seg)
    save_image(output.image, args.out)
    if args.artifacts:
        save_artifacts(output.artifacts, Path(args.artifacts))
    print(f"Wrote {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: HeadSwapConfig) -> int:
    models = SwapModels.from_checkpoints(config, args.aligner, args.blender, force=args.force)
    dataset = _dataset(args.data, config)
    report = evaluate(models, dataset, config=config, progress=args.progress)
    out = Path(args.out)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "summary.json")
    for split, columns in report.aggregate().items():
        summary = ", ".join(f"{name}={stats['mean']:.4f}" for name, stats in columns.items())
        print(f"{split}: {summary}")
    if report.errors:
        print(f"{len(report.errors)} metric errors; see summary.json", file=sys.stderr)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-aligner": cmd_train,
    "train-blender": cmd_train,
    "swap": cmd_swap,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        configure_logging(config.log_level, config.log_file)
        return _COMMANDS[args.command](args, config)
    except HeadSwapError as e:
        logger.error("%s (%s)", e.message, e.error_type)
        print(f"Error: {e.message}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
