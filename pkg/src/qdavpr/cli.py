"""
The ``qdavpr`` command line interface.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any, Callable, Sequence

from qdavpr.config import (
    EvalProtocol,
    ExperimentConfig,
    ProtocolMode,
    load_config,
    override_config,
    parse_grid,
)
from qdavpr.data import (
    augment_manifest,
    generate_toy_places,
    load_manifest,
    parse_domains,
)
from qdavpr.error import ConfigError, QdaVPRError
from qdavpr.serial import read_features, strip_adversarial, write_recall_report
from qdavpr.train import Trainer, dump_attention, evaluate, run_sweep

logger = logging.getLogger(__name__)


def _ranks(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(rank) for rank in value.split(",") if rank.strip())
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"Invalid recall ranks `{value}`!") from err


####################################################################################################
### Commands
####################################################################################################


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(path=args.config) if args.config else ExperimentConfig()
    config = override_config(config, args.set)
    config.validate()
    return config


def _training_inputs(config: ExperimentConfig) -> dict[str, Any]:
    if config.train.manifest is None:
        raise ConfigError("`train.manifest` is not set!")
    manifest = load_manifest(config.train.manifest)
    validation = (
        load_manifest(config.train.validation_manifest)
        if config.train.validation_manifest
        else None
    )
    features = read_features(config.train.features) if config.train.features else None
    validation_features = (
        read_features(config.train.validation_features)
        if config.train.validation_features
        else None
    )
    return {
        "manifest": manifest,
        "validation": validation,
        "features": features,
        "validation_features": validation_features,
    }


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment(args)
    trainer = Trainer(
        config, **_training_inputs(config), output_dir=args.output, workers=args.workers
    )
    result = trainer.fit()
    logger.info(
        "Best epoch %d (R@1 %s), checkpoints in %s",
        result.best_epoch,
        result.best_metric,
        trainer.output_dir,
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _experiment(args)
    runs = run_sweep(
        config,
        parse_grid(args.grid),
        output_dir=args.output or Path(config.train.output_dir) / "sweep",
        pca_dims=args.pca_dims,
        workers=args.workers,
        **_training_inputs(config),
    )
    for run in runs:
        logger.info(
            "%s: R@1 %s %s",
            " ".join(run.overrides) or "(base config)",
            run.result.best_metric,
            run.pca_recall_at_1 or "",
        )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    protocol = EvalProtocol(
        mode=ProtocolMode(args.protocol),
        geo_threshold_m=args.geo_threshold,
        frame_tolerance=args.frame_tolerance,
        recall_ranks=args.recall,
    )
    protocol.validate()
    report = evaluate(
        args.ckpt,
        load_manifest(args.manifest),
        protocol,
        resize=args.resize,
        pca_dim=args.pca_dim,
        features=read_features(args.features) if args.features else None,
        save_db=args.save_db,
    )
    print(report.table(), end="")
    if args.out:
        write_recall_report(report, args.out)
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    augment_manifest(manifest, args.out, parse_domains(args.domains), args.seed)
    return 0


def cmd_attn(args: argparse.Namespace) -> int:
    for path in dump_attention(args.ckpt, args.image, args.out, resize=args.resize):
        logger.info("Wrote %s", path)
    return 0


def cmd_toygen(args: argparse.Namespace) -> int:
    generate_toy_places(
        args.places,
        args.per_place,
        args.size,
        args.seed,
        unseen_queries=args.unseen_queries,
        out_dir=args.out,
    )
    return 0


def cmd_strip(args: argparse.Namespace) -> int:
    strip_adversarial(args.ckpt, args.out)
    return 0


####################################################################################################
### Parser
####################################################################################################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdavpr", description="Query-based domain-agnostic visual place recognition."
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="verbosity of the log output",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model")
    train.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    train.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config entry, repeatable",
    )
    train.add_argument("--output", type=Path, help="output directory, overrides train.output_dir")
    train.add_argument("--workers", type=int, default=0, help="image preparation threads")
    train.set_defaults(func=cmd_train)

    sweep = commands.add_parser("sweep", help="train one model per combination of a config grid")
    sweep.add_argument("--config", type=Path, help="JSON or YAML base experiment config")
    sweep.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a base config entry, repeatable",
    )
    sweep.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="SECTION.KEY=V1,V2",
        help="values to sweep for a config entry, repeatable",
    )
    sweep.add_argument(
        "--pca-dims",
        type=_ranks,
        default=(),
        help="comma separated PCA dims to evaluate the best checkpoint of every run with",
    )
    sweep.add_argument("--output", type=Path, help="sweep directory, default <output_dir>/sweep")
    sweep.add_argument("--workers", type=int, default=0, help="image preparation threads")
    sweep.set_defaults(func=cmd_sweep)

    ev = commands.add_parser("eval", help="Recall@N of a checkpoint")
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument(
        "--protocol", choices=[mode.value for mode in ProtocolMode], default=ProtocolMode.GEO.value
    )
    ev.add_argument("--recall", type=_ranks, default=(1, 5, 10))
    ev.add_argument("--pca-dim", type=int)
    ev.add_argument("--resize", type=int)
    ev.add_argument("--geo-threshold", type=float, default=25.0)
    ev.add_argument("--frame-tolerance", type=int, default=10)
    ev.add_argument("--features", type=Path, help="features file parallel to the manifest rows")
    ev.add_argument("--save-db", type=Path, help="write the database descriptors to this file")
    ev.add_argument("--out", type=Path, help="directory for the recall report files")
    ev.set_defaults(func=cmd_eval)

    augment = commands.add_parser("augment", help="write domain copies of a dataset")
    augment.add_argument("--manifest", type=Path, required=True)
    augment.add_argument("--out", type=Path, required=True)
    augment.add_argument("--domains", default="fog,rain,snow,wind,night,sun")
    augment.add_argument("--seed", type=int, default=0)
    augment.set_defaults(func=cmd_augment)

    attn = commands.add_parser("attn", help="export cross-attention heatmaps")
    attn.add_argument("--ckpt", type=Path, required=True)
    attn.add_argument("--image", type=Path, required=True)
    attn.add_argument("--out", type=Path, required=True)
    attn.add_argument("--resize", type=int)
    attn.set_defaults(func=cmd_attn)

    toygen = commands.add_parser("toygen", help="generate a procedural toy dataset")
    toygen.add_argument("--places", type=int, required=True)
    toygen.add_argument("--per-place", type=int, required=True)
    toygen.add_argument("--out", type=Path, required=True)
    toygen.add_argument("--seed", type=int, default=0)
    toygen.add_argument("--size", type=int, default=56, help="image side in pixels")
    toygen.add_argument("--unseen-queries", action="store_true")
    toygen.set_defaults(func=cmd_toygen)

    strip = commands.add_parser("strip", help="drop the train-only checkpoint namespaces")
    strip.add_argument("--ckpt", type=Path, required=True)
    strip.add_argument("--out", type=Path, required=True)
    strip.set_defaults(func=cmd_strip)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except QdaVPRError as err:
        logger.error("%s: %s", type(err).__name__, err)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
