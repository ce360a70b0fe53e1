from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
import pytest

from app.config import get_settings
from app.engine.rng import Rng
from app.models.schemas import MambaBlockConfig, ModelConfig
from app.services.data_pipeline import TimeSeriesTable


def sinusoids(rows: int, channels: int, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Two-sinusoid mixture per channel, with distinct periods and offsets"""
    t = np.arange(rows, dtype=np.float64)[:, None]
    v = np.arange(channels, dtype=np.float64)[None, :]
    values = np.sin(2 * np.pi * t / (16.0 + 4.0 * v) + v) + 0.5 * np.sin(2 * np.pi * t / (7.0 + v))
    values = values + 0.1 * v
    if noise:
        values = values + noise * np.random.default_rng(seed).normal(size=values.shape)
    return values


def tiny_model_config(**overrides) -> ModelConfig:
    block = dict(d_model=8, d_state=4)
    block.update(overrides.pop("block", {}))
    values = dict(look_back=16, horizon=4, channels=2, patch_len=4, stride=2, d_model=8, num_blocks=1)
    values.update(overrides)
    return ModelConfig(block=MambaBlockConfig(**block), **values)


TINY_EXPERIMENT = """\
has_timestamp = true

[data]
look_back = 16
horizon = 4

[model]
patch_len = 4
stride = 2
d_model = 8
num_blocks = 1

[block]
d_state = 4

[optim]
epochs = 1
batch_size = 16
lr = 0.001

[run]
seed = 7
"""


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def sine_table() -> Callable[..., TimeSeriesTable]:
    def _make(rows: int = 200, channels: int = 3, noise: float = 0.0) -> TimeSeriesTable:
        return TimeSeriesTable(
            columns=[f"c{i}" for i in range(channels)],
            values=sinusoids(rows, channels, noise),
            name="synthetic",
        )
    return _make


@pytest.fixture
def write_csv(tmp_path: Path) -> Callable[..., Path]:
    """Write a synthetic series (with a date column) and return its path"""
    def _write(name: str = "toy.csv", rows: int = 120, channels: int = 3, values: Optional[np.ndarray] = None,
               timestamp: bool = True) -> Path:
        data = sinusoids(rows, channels, noise=0.05) if values is None else values
        frame = pd.DataFrame(data, columns=[f"ch{i}" for i in range(data.shape[1])])
        if timestamp:
            frame.insert(0, "date", pd.date_range("2020-01-01", periods=len(frame), freq="h").astype(str))
        path = tmp_path / name
        frame.to_csv(path, index=False)
        return path
    return _write


@pytest.fixture
def tiny_experiment_file(tmp_path: Path, write_csv) -> Path:
    dataset = write_csv()
    path = tmp_path / "tiny.toml"
    path.write_text(f'dataset_path = "{dataset.as_posix()}"\n' + TINY_EXPERIMENT, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path: Path, monkeypatch):
    monkeypatch.setenv("CMAMBA_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.delenv("CMAMBA_CHECKPOINT", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
