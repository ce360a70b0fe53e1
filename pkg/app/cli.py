"""Command line: python main.py <train|eval|ablate|flops|predict|sweep|serve> ..."""
import argparse
import logging
import sys
from typing import List, Optional, Sequence

import uvicorn

from app.config import get_settings, load_experiment_config, parse_override
from app.errors import ConfigError, DataError
from app.services.experiment import (
    dataset_channels,
    evaluate_checkpoint,
    flops_for_config,
    predict_csv,
    run_ablation,
    run_sweep,
    run_training,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML experiment config")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key; may be repeated")
    parser.add_argument("--seed", type=int, help="Shorthand for --override seed=N")


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmamba", description="CMamba multivariate forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model and write report, checkpoint and predictions")
    _config_args(p)
    p.add_argument("--output", help="Run directory (default: $CMAMBA_OUTPUT_ROOT/<dataset>_<L>_<T>_seed<seed>)")

    p = sub.add_parser("eval", help="Test-split MSE/MAE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="Use another copy of the training dataset")

    p = sub.add_parser("ablate", help="Train one model per flag combination")
    _config_args(p)
    p.add_argument("--axes", nargs="+", required=True,
                   help="Any of use_conv use_z_branch a_mode d_mode block_case gdd mixup")
    p.add_argument("--output")

    p = sub.add_parser("flops", help="Analytic FLOP count and GDD-MLP increment")
    _config_args(p)
    p.add_argument("--channels", type=int, help="Number of channels V (default: read from the dataset header)")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("predict", help="Rolling forecasts for a CSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--no-timestamp", action="store_true", help="The CSV has no leading timestamp column")

    p = sub.add_parser("sweep", help="Train once per value of one config key")
    _config_args(p)
    p.add_argument("--key", required=True)
    p.add_argument("--values", nargs="+", required=True, help="Values, read as TOML literals")
    p.add_argument("--output")

    p = sub.add_parser("serve", help="Run the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    result, run_dir = run_training(config, args.output)
    report = result.report
    print(f"run directory: {run_dir}")
    if report.test_mse is not None:
        print(f"test MSE: {report.test_mse:.6f}  test MAE: {report.test_mae:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    mse, mae = evaluate_checkpoint(args.checkpoint, args.dataset)
    print(f"test MSE: {mse:.6f}  test MAE: {mae:.6f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    rows = run_ablation(config, args.axes, args.output)
    for row in rows:
        print(f"{row.label:<48} MSE {row.mse}  MAE {row.mae}")
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    channels = args.channels if args.channels is not None else dataset_channels(config)
    report = flops_for_config(config, channels, args.batch_size)
    print(f"total FLOPs: {report.total}")
    print(f"GDD-MLP networks: {report.gdd_mlp_part}")
    print(f"GDD-MLP module: {report.gdd_module_total}")
    print(f"increment: {100.0 * report.increment:.4f}%")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    frame = predict_csv(args.checkpoint, args.input, args.output, args.horizon, has_timestamp=not args.no_timestamp)
    print(f"wrote {frame['sample_index'].nunique()} forecasts to {args.output}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    values = [parse_override(f"{args.key}={raw}")[1] for raw in args.values]
    frame = run_sweep(config, args.key, values, args.output)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    uvicorn.run("main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
