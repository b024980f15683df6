"""
Main entry point for SpotIQ.
Provides the command-line interface: init, generate, train, eval and report.
"""

import argparse
import sys
from typing import Optional

from loguru import logger
from pydantic import ValidationError

from .config import as_configuration_error, load_eval_spec, load_train_config, settings, write_default_config
from .errors import SpotIQError
from .models import Split, TrainConfig

CONSOLE_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>"
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def setup_logging(level: str):
    """Console sink plus the rotating file sink from settings."""
    logger.remove()
    logger.add(sys.stdout, level=level, format=CONSOLE_FORMAT)
    logger.add(
        settings.log_file,
        level=level,
        format=FILE_FORMAT,
        rotation="1 day",
        retention="30 days",
        compression="zip",
    )


def _config_from_args(args) -> TrainConfig:
    config = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "no_astrm", False):
        overrides["astrm"] = False
    if getattr(args, "sharpness", None):
        overrides["sharpness"] = args.sharpness
    if getattr(args, "contrastive", None):
        overrides["contrastive"] = args.contrastive
    if getattr(args, "no_mixup", False):
        overrides["mixup"] = False

    try:
        if overrides:
            config = config.with_ablation(**overrides)
        if getattr(args, "seed", None) is not None:
            config = TrainConfig.model_validate({**config.model_dump(), "seed": args.seed})
    except ValidationError as e:
        raise as_configuration_error(e, "command-line overrides") from e
    return config


def cmd_init(args) -> int:
    written = write_default_config(args.output, overwrite=args.force)
    print(f"{'Wrote' if written else 'Kept existing'} {args.output}")
    return 0


def cmd_generate(args) -> int:
    from .data_synth import class_distribution, generate_dataset, save_dataset
    from .reporting import write_class_distribution

    spec = _config_from_args(args).dataset
    records = generate_dataset(spec)
    manifest_path = save_dataset(records, args.output, spec)
    df = write_class_distribution(
        class_distribution(records, spec.num_classes), spec.resolved_class_names(), args.output
    )
    print(f"\nDataset written to {manifest_path.parent}")
    print(df.to_string(index=False))
    return 0


def cmd_train(args) -> int:
    from .trainer import run_training

    config = _config_from_args(args)
    result = run_training(config, args.data, args.output, resume=args.resume)

    print("\nTraining Summary:")
    print("=" * 30)
    print(f"Epochs: {result.epochs_run}")
    print(f"Parameters: {result.parameters:,}")
    print(f"Skipped steps: {result.skipped_steps}")
    if result.best_map is not None:
        print(f"Best val mAP@{config.eval.selection_delta}: {result.best_map:.4f} (epoch {result.best_epoch})")
    print(f"Checkpoints: {result.output_dir}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import run_evaluation

    report = run_evaluation(
        args.checkpoint,
        args.data,
        output_dir=args.output,
        split=Split(args.split),
        oracle=args.oracle,
        device=settings.resolve_device(),
        eval_spec=load_eval_spec(args.eval_config) if args.eval_config else None,
        tolerance_seconds=args.tolerance_seconds,
        predictions_path=args.predictions,
    )
    print("\nEvaluation Results:")
    print("=" * 30)
    print(report.summary_frame().to_string(index=False))
    print()
    print(report.ap_frame().to_string(index=False))
    return 0


def cmd_report(args) -> int:
    from .reporting import write_comparison

    df = write_comparison(args.runs, args.output, split=args.split)
    print(df.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="SpotIQ - precise event spotting on synthetic video with ASTRM, SoftIC loss and ASAM"
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=None,
        help="Logging level (default: SPOTIQ_LOG_LEVEL or INFO)",
    )
    parser.add_argument("--version", action="version", version="SpotIQ v0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init", help="Write the default configuration file")
    init.add_argument("--output", default="spotiq.json", help="Destination config file (default: spotiq.json)")
    init.add_argument("--force", action="store_true", help="Overwrite an existing file")
    init.set_defaults(handler=cmd_init)

    generate = sub.add_parser("generate", help="Generate the synthetic dataset")
    generate.add_argument("--config", help="Config file (default: built-in defaults)")
    generate.add_argument("--output", required=True, help="Dataset directory (created if missing)")
    generate.set_defaults(handler=cmd_generate)

    train = sub.add_parser("train", help="Train a model")
    train.add_argument("--config", help="Config file (default: built-in defaults)")
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--output", required=True, help="Run directory")
    train.add_argument("--resume", action="store_true", help="Continue from last.npz in the run directory")
    train.add_argument("--seed", type=int, default=None, help="Override the training seed")
    train.add_argument("--no-astrm", action="store_true", help="Disable ASTRM blocks")
    train.add_argument("--sharpness", choices=["none", "sam", "asam"], help="Sharpness-aware mode")
    train.add_argument("--contrastive", choices=["none", "ic", "softic"], help="Contrastive term")
    train.add_argument("--no-mixup", action="store_true", help="Disable mixup")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True, help="Checkpoint (.npz)")
    evaluate.add_argument("--data", required=True, help="Dataset directory")
    evaluate.add_argument("--output", help="Report directory (default: <checkpoint dir>/eval/<split>)")
    evaluate.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    evaluate.add_argument("--oracle", action="store_true", help="Score the ground truth as predictions")
    evaluate.add_argument("--eval-config", help="EvalSpec JSON replacing the checkpoint's evaluation settings")
    evaluate.add_argument(
        "--tolerance-seconds",
        action="store_true",
        help="Tight 1-4 s and loose 5-60 s tolerance ranges at the dataset fps",
    )
    evaluate.add_argument("--predictions", help="Re-score this prediction file instead of running the model")
    evaluate.set_defaults(handler=cmd_eval)

    report = sub.add_parser("report", help="Compare evaluated runs")
    report.add_argument("runs", nargs="+", help="Run directories")
    report.add_argument("--output", required=True, help="Directory for comparison.csv and plots")
    report.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    report.set_defaults(handler=cmd_report)

    return parser


def run(argv: Optional[list[str]] = None) -> int:
    """Parse arguments, dispatch and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level)
    settings.apply_torch_runtime()

    try:
        return args.handler(args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 0
    except SpotIQError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 3


def main():
    """Main entry point for SpotIQ."""
    sys.exit(run())


if __name__ == "__main__":
    main()
