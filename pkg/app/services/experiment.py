"""Run orchestration shared by the command line and the HTTP routes."""
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import build_config, dump_config, get_settings
from app.errors import ConfigError, DataError
from app.models.schemas import (
    MAMBA_ABLATION_CASES,
    AblationRow,
    ChannelMixerKind,
    ExperimentConfig,
    FlopReport,
    MixupMode,
)
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.data_pipeline import (
    SeriesView,
    SplitSpec,
    TimeSeriesTable,
    WindowSample,
    apply_normalization,
    load_csv,
    make_splits,
    normalize_global,
    prediction_frame,
    window_count,
    windows,
    write_predictions,
)
from app.services.flops import estimate_flops
from app.services.forecaster import CMambaModel, predict
from app.services.trainer import TrainResult, metrics, train

logger = logging.getLogger(__name__)

REPORT_FILE = "report.txt"
CHECKPOINT_FILE = "model.ckpt"
PREDICTIONS_FILE = "predictions.csv"
CONFIG_FILE = "config.toml"

# keys that change the prepared windows
DATA_KEYS = frozenset({"dataset_path", "dataset_name", "has_timestamp", "split_ratios", "look_back", "horizon"})

# axis name -> list of (label, overrides)
ABLATION_AXES: Dict[str, List[Tuple[str, Dict[str, Any]]]] = {
    "use_conv": [("conv", {"use_conv": True}), ("no_conv", {"use_conv": False})],
    "use_z_branch": [("z", {"use_z_branch": True}), ("no_z", {"use_z_branch": False})],
    "a_mode": [(m, {"a_mode": m}) for m in ("feature_specific", "feature_independent")],
    "d_mode": [(m, {"d_mode": m}) for m in ("free", "data_dependent")],
    "block_case": [(name, {k: getattr(v, "value", v) for k, v in flags.items()}) for name, flags in MAMBA_ABLATION_CASES.items()],
    "gdd": [("gdd_on", {"channel_mixer": ChannelMixerKind.GDD.value}), ("gdd_off", {"channel_mixer": ChannelMixerKind.NONE.value})],
    "mixup": [("mixup_on", {"mixup_mode": MixupMode.CHANNEL.value}), ("mixup_off", {"mixup_mode": MixupMode.OFF.value})],
}


@dataclass
class PreparedData:
    table: TimeSeriesTable
    normalized: TimeSeriesTable
    mean: np.ndarray
    std: np.ndarray
    train_view: SeriesView
    val_view: SeriesView
    test_view: SeriesView
    train: List[WindowSample]
    val: List[WindowSample]
    test: List[WindowSample]


def _windows_or_empty(view: SeriesView, config: ExperimentConfig) -> List[WindowSample]:
    if window_count(view, config.look_back, config.horizon) == 0:
        return []
    return windows(view, config.look_back, config.horizon)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    table = load_csv(config.dataset_path, config.has_timestamp, name=config.resolved_dataset_name)
    spec = SplitSpec(ratios=config.resolved_split_ratios, look_back=config.look_back)
    raw_train, _, _ = make_splits(table, spec, config.horizon)
    normalized, mean, std = normalize_global(table, raw_train)
    train_view, val_view, test_view = make_splits(normalized, spec, config.horizon)
    data = PreparedData(
        table=table,
        normalized=normalized,
        mean=mean,
        std=std,
        train_view=train_view,
        val_view=val_view,
        test_view=test_view,
        train=_windows_or_empty(train_view, config),
        val=_windows_or_empty(val_view, config),
        test=_windows_or_empty(test_view, config),
    )
    logger.info(f"Windows: train {len(data.train)}, val {len(data.val)}, test {len(data.test)}")
    return data


def default_run_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    name = f"{config.resolved_dataset_name}_{config.look_back}_{config.horizon}_seed{config.seed}"
    return Path(get_settings().output_root) / name


def run_training(
    config: ExperimentConfig,
    output_dir: Optional[str | Path] = None,
    data: Optional[PreparedData] = None,
) -> Tuple[TrainResult, Path]:
    """Train one model and write report, checkpoint, test predictions and config echo"""
    run_dir = Path(output_dir) if output_dir is not None else default_run_dir(config)
    data = data or prepare_data(config)
    model = CMambaModel(config.model_config_for(data.table.num_channels), seed=config.seed)
    logger.info(f"Training {model.num_parameters()} parameters into {run_dir}")

    result = train(
        model,
        data.train,
        data.val,
        data.test,
        optim=config.optimizer_config(),
        mixup=config.mixup_config(),
        seed=config.seed,
    )

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(dump_config(config), encoding="utf-8")
    (run_dir / REPORT_FILE).write_text(result.report.to_text(), encoding="utf-8")
    save_checkpoint(
        run_dir / CHECKPOINT_FILE,
        model,
        experiment=config,
        channel_names=data.table.columns,
        extras={"data_mean": data.mean, "data_std": data.std},
    )
    if result.test_predictions is not None:
        y_pred, y_true = result.test_predictions
        write_predictions(run_dir / PREDICTIONS_FILE, y_pred, data.table.columns, y_true)
    return result, run_dir


def _apply(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    values = config.model_dump(exclude_none=True)
    values.update(overrides)
    return build_config(values)


def ablation_grid(axes: Sequence[str]) -> List[Tuple[str, Dict[str, Any]]]:
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axis {unknown}; supported: {sorted(ABLATION_AXES)}")
    if not axes:
        raise ConfigError("at least one ablation axis is required")
    grid = []
    for combo in itertools.product(*(ABLATION_AXES[a] for a in axes)):
        label = "+".join(name for name, _ in combo)
        flags: Dict[str, Any] = {}
        for _, overrides in combo:
            clash = set(flags) & set(overrides)
            if clash:
                raise ConfigError(f"ablation axes set {sorted(clash)} more than once")
            flags.update(overrides)
        grid.append((label, flags))
    return grid


def run_ablation(config: ExperimentConfig, axes: Sequence[str], output_dir: Optional[str | Path] = None) -> List[AblationRow]:
    """One training per flag combination, all with the config's seed; writes ablation.csv"""
    grid = ablation_grid(axes)
    root = Path(output_dir) if output_dir is not None else default_run_dir(config) / "ablation"
    data = prepare_data(config)
    rows: List[AblationRow] = []
    for label, flags in grid:
        logger.info(f"Ablation run {label}: {flags}")
        run_config = _apply(config, flags)
        result, _ = run_training(run_config, root / label, data=data)
        rows.append(AblationRow(label=label, flags=flags, mse=result.report.test_mse, mae=result.report.test_mae))

    frame = pd.DataFrame([{"label": r.label, **r.flags, "mse": r.mse, "mae": r.mae} for r in rows])
    root.mkdir(parents=True, exist_ok=True)
    frame.to_csv(root / "ablation.csv", index=False, float_format="%.17g")
    return rows


def run_sweep(
    config: ExperimentConfig,
    key: str,
    values: Sequence[Any],
    output_dir: Optional[str | Path] = None,
) -> pd.DataFrame:
    """Train once per value of `key`; writes sweep.csv and a mean/std summary"""
    if key not in ExperimentConfig.model_fields:
        raise ConfigError(f"unknown sweep key '{key}'")
    if not values:
        raise ConfigError("sweep needs at least one value")
    root = Path(output_dir) if output_dir is not None else default_run_dir(config) / f"sweep_{key}"
    shared = None if key in DATA_KEYS else prepare_data(config)

    records = []
    for value in values:
        run_config = _apply(config, {key: value})
        result, _ = run_training(run_config, root / f"{key}={value}", data=shared)
        records.append({key: value, "mse": result.report.test_mse, "mae": result.report.test_mae})
    frame = pd.DataFrame(records)
    root.mkdir(parents=True, exist_ok=True)
    frame.to_csv(root / "sweep.csv", index=False, float_format="%.17g")

    summary = []
    for column in ("mse", "mae"):
        series = frame[column].astype(float)
        summary.append(f"{column}: {series.mean():.6f} +- {series.std(ddof=0):.6f}")
    (root / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    logger.info(f"Sweep over {key}: " + "; ".join(summary))
    return frame


def evaluate_checkpoint(checkpoint_path: str | Path, dataset_path: Optional[str] = None) -> Tuple[float, float]:
    """Test-split (MSE, MAE) of a checkpoint on the dataset it was trained on"""
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.experiment is None:
        raise ConfigError(f"checkpoint {checkpoint_path} carries no experiment config")
    config = ckpt.experiment if dataset_path is None else _apply(ckpt.experiment, {"dataset_path": dataset_path})
    data = prepare_data(config)
    if data.table.num_channels != ckpt.model.config.channels:
        raise ConfigError(
            f"checkpoint has {ckpt.model.config.channels} channels, dataset has {data.table.num_channels}"
        )
    if not data.test:
        raise DataError("dataset has no test windows")
    x = np.stack([s.x for s in data.test])
    y = np.stack([s.y for s in data.test])
    return metrics(predict(ckpt.model, x), y)


def predict_csv(
    checkpoint_path: str | Path,
    input_csv: str | Path,
    output_csv: Optional[str | Path] = None,
    horizon: Optional[int] = None,
    has_timestamp: bool = True,
) -> pd.DataFrame:
    """Rolling forecasts over every look-back window of a CSV, in the file's own units"""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = ckpt.model.config
    if horizon is not None and horizon != cfg.horizon:
        raise ConfigError(f"checkpoint forecasts {cfg.horizon} steps, {horizon} requested")
    table = load_csv(input_csv, has_timestamp)
    if table.num_channels != cfg.channels:
        raise ConfigError(f"checkpoint expects V={cfg.channels} channels, {input_csv} has V={table.num_channels}")
    L, T = cfg.look_back, cfg.horizon
    count = table.num_rows - L + 1
    if count < 1:
        raise DataError(f"{input_csv} has {table.num_rows} rows, needs at least look_back={L}")

    stats = ckpt.data_stats
    values = table.values if stats is None else apply_normalization(table.values, *stats)
    x = np.stack([values[s:s + L] for s in range(count)])
    y_pred = predict(ckpt.model, x)
    if stats is not None:
        y_pred = y_pred * stats[1] + stats[0]

    y_true = np.full(y_pred.shape, np.nan)
    for s in range(count):
        future = table.values[s + L:s + L + T]
        y_true[s, :len(future)] = future
    names = ckpt.channel_names or table.columns
    frame = prediction_frame(y_pred, names, y_true)
    if output_csv is not None:
        Path(output_csv).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output_csv, index=False, float_format="%.17g")
        logger.info(f"Wrote {count} rolling forecasts to {output_csv}")
    return frame


def dataset_channels(config: ExperimentConfig) -> int:
    path = Path(config.dataset_path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    header = pd.read_csv(path, nrows=0).columns
    return len(header) - (1 if config.has_timestamp else 0)


def flops_for_config(config: ExperimentConfig, channels: int, batch_size: Optional[int] = None) -> FlopReport:
    return estimate_flops(config.model_config_for(channels), batch_size or config.batch_size)
