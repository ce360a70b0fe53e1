"""CSV ingestion, global normalization, chronological splits, windows and batches."""
import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.engine.rng import Rng
from app.errors import DataError
from app.services.augment import MixupAugmenter

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["sample_index", "channel", "step", "y_true", "y_pred"]


@dataclass
class TimeSeriesTable:
    columns: List[str]
    values: np.ndarray
    timestamps: Optional[pd.Series] = None
    name: str = ""

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float]
    look_back: int

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")

    @classmethod
    def for_dataset(cls, name: str, look_back: int) -> "SplitSpec":
        ratios = (0.6, 0.2, 0.2) if name.upper().startswith("ETT") else (0.7, 0.1, 0.2)
        return cls(ratios=ratios, look_back=look_back)


@dataclass(frozen=True)
class SeriesView:
    """Rows [start, stop) of a table; rows before `core_start` are look-back context only"""
    name: str
    table: TimeSeriesTable
    start: int
    stop: int
    core_start: int

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def values(self) -> np.ndarray:
        return self.table.values[self.start:self.stop]

    @property
    def core_rows(self) -> int:
        return self.stop - self.core_start


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray
    y: np.ndarray
    start: int = 0


# --- ingestion

def _cell_error(row: int, column: str, raw) -> DataError:
    # row is 1-based over data rows; the header is line 1 of the file
    return DataError(f"invalid value {raw!r} at row {row}, column '{column}' (line {row + 1})")


def _check_field_counts(path: Path) -> None:
    """Every data row must have as many fields as the header"""
    with path.open(newline="", encoding="utf-8") as fh:
        # blank lines are skipped, as pandas does
        counts = [len(fields) for fields in csv.reader(fh) if fields]
    if not counts:
        raise DataError(f"{path} is empty")
    for row, count in enumerate(counts[1:], start=1):
        if count != counts[0]:
            raise DataError(
                f"ragged row {row} in {path} (line {row + 1}): expected {counts[0]} fields, found {count}"
            )


def load_csv(path: str | Path, has_timestamp: bool = True, name: Optional[str] = None) -> TimeSeriesTable:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    _check_field_counts(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    except pd.errors.ParserError as e:
        raise DataError(f"cannot parse {path}: {e}") from e
    if frame.shape[0] == 0:
        raise DataError(f"{path} has a header but no rows")

    value_columns = list(frame.columns[1:] if has_timestamp else frame.columns)
    if not value_columns:
        raise DataError(f"{path} has no value columns")

    values = np.empty((frame.shape[0], len(value_columns)), dtype=np.float64)
    for j, column in enumerate(value_columns):
        raw = frame[column]
        parsed = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(parsed)
        if bad.any():
            i = int(np.argmax(bad))
            raise _cell_error(i + 1, column, raw.iloc[i])
        values[:, j] = parsed

    timestamps = pd.to_datetime(frame.iloc[:, 0], errors="coerce") if has_timestamp else None
    table = TimeSeriesTable(columns=value_columns, values=values, timestamps=timestamps, name=name or path.stem)
    logger.info(f"Loaded {path}: {table.num_rows} rows x {table.num_channels} channels")
    return table


# --- normalization and splits

def normalize_global(table: TimeSeriesTable, stats_from: SeriesView) -> Tuple[TimeSeriesTable, np.ndarray, np.ndarray]:
    """Z-score every channel with the mean/std (population) of the rows in `stats_from`"""
    train = stats_from.values
    if len(train) == 0:
        raise DataError("cannot compute normalization statistics from an empty split")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    flat = np.flatnonzero(std == 0.0)
    if flat.size:
        raise DataError(f"channel '{table.columns[flat[0]]}' has zero variance in the training split")
    normalized = TimeSeriesTable(
        columns=list(table.columns),
        values=(table.values - mean) / std,
        timestamps=table.timestamps,
        name=table.name,
    )
    return normalized, mean, std


def apply_normalization(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - mean) / std


def _floor_rows(total: int, ratio: float) -> int:
    return int(math.floor(total * ratio + 1e-9))


def make_splits(
    table: TimeSeriesTable,
    spec: SplitSpec,
    horizon: Optional[int] = None,
) -> Tuple[SeriesView, SeriesView, SeriesView]:
    """Contiguous train/val/test views; val and test reach back `look_back` rows for context"""
    M, L = table.num_rows, spec.look_back
    n_train = _floor_rows(M, spec.ratios[0])
    n_val = _floor_rows(M, spec.ratios[1])
    n_test = M - n_train - n_val

    train = SeriesView("train", table, 0, n_train, 0)
    if n_val > 0:
        val = SeriesView("val", table, max(0, n_train - L), n_train + n_val, n_train)
    else:
        val = SeriesView("val", table, n_train, n_train, n_train)
    if n_test > 0:
        test = SeriesView("test", table, max(0, n_train + n_val - L), M, n_train + n_val)
    else:
        test = SeriesView("test", table, M, M, M)

    if horizon is not None:
        for view, ratio in zip((train, val, test), spec.ratios):
            if ratio > 0 and len(view) < L + horizon:
                raise DataError(
                    f"{view.name} split has {len(view)} rows, needs at least {L + horizon} (look_back + horizon)"
                )
    logger.info(f"Split {M} rows into train {n_train}, val {n_val}, test {n_test} core rows")
    return train, val, test


# --- windows and batches

def windows(view: SeriesView, look_back: int, horizon: int, stride: int = 1) -> List[WindowSample]:
    """Sliding (x, y) pairs in chronological order; y starts right after x"""
    values = view.values
    count = len(values) - look_back - horizon + 1
    if count < 1:
        raise DataError(f"{view.name} view has {len(values)} rows, needs at least {look_back + horizon}")
    return [
        WindowSample(x=values[s:s + look_back], y=values[s + look_back:s + look_back + horizon], start=view.start + s)
        for s in range(0, count, stride)
    ]


def window_count(view: SeriesView, look_back: int, horizon: int) -> int:
    return max(0, len(view) - look_back - horizon + 1)


def stack(samples: Sequence[WindowSample]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([s.x for s in samples]), np.stack([s.y for s in samples])


def batches(
    samples: Sequence[WindowSample],
    batch_size: int,
    shuffle: bool,
    rng: Optional[Rng] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One pass over `samples`; the last partial batch is kept"""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        yield stack([samples[i] for i in order[start:start + batch_size]])


class BatchLoader:
    """Epoch iterator over window samples.

    Training epochs are shuffled with a stream derived from (seed, epoch) and
    batch b is augmented with a stream derived from (seed, epoch, b).
    With num_workers > 0, worker w builds batches w, w + W, ... into its own
    bounded queue and the consumer reads the queues round-robin, so neither
    batch order nor batch contents depend on thread timing or worker count.
    """

    def __init__(
        self,
        samples: Sequence[WindowSample],
        batch_size: int,
        shuffle: bool = False,
        rng: Optional[Rng] = None,
        augmenter: Optional[MixupAugmenter] = None,
        training: bool = False,
        num_workers: int = 0,
        queue_size: int = 4,
    ):
        if shuffle and rng is None:
            raise ValueError("a shuffled loader needs an rng")
        self.samples = samples
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.rng = rng or Rng(0)
        self.augmenter = augmenter
        self.training = training
        self.num_workers = num_workers
        self.queue_size = queue_size
        self.epoch = 0

    def __len__(self) -> int:
        return math.ceil(len(self.samples) / self.batch_size)

    def _order(self, epoch: int) -> np.ndarray:
        if self.shuffle:
            return self.rng.child(0, epoch).permutation(len(self.samples))
        return np.arange(len(self.samples))

    def _build(self, indices: np.ndarray, epoch: int, batch_index: int) -> Tuple[np.ndarray, np.ndarray]:
        x, y = stack([self.samples[i] for i in indices])
        if self.training and self.augmenter is not None and self.augmenter.active:
            batch_rng = self.rng.child(1, epoch, batch_index)
            x, y = self.augmenter.apply_batch(x, y, batch_rng, training=True)
        return x, y

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        epoch = self.epoch
        self.epoch += 1
        order = self._order(epoch)
        chunks = [order[s:s + self.batch_size] for s in range(0, len(order), self.batch_size)]
        if self.num_workers <= 0:
            for b, chunk in enumerate(chunks):
                yield self._build(chunk, epoch, b)
            return
        yield from self._iter_threaded(chunks, epoch)

    def _iter_threaded(self, chunks: List[np.ndarray], epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        workers = min(self.num_workers, max(1, len(chunks)))
        queues = [queue.Queue(maxsize=self.queue_size) for _ in range(workers)]
        stop = threading.Event()

        def _put(q: queue.Queue, item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def _work(worker_id: int) -> None:
            for b in range(worker_id, len(chunks), workers):
                try:
                    item = self._build(chunks[b], epoch, b)
                except Exception as e:  # handed to the consumer
                    _put(queues[worker_id], e)
                    return
                if not _put(queues[worker_id], item):
                    return

        threads = [threading.Thread(target=_work, args=(w,), daemon=True) for w in range(workers)]
        for t in threads:
            t.start()
        try:
            for b in range(len(chunks)):
                item = queues[b % workers].get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            for t in threads:
                t.join(timeout=1.0)


# --- prediction export

def prediction_frame(
    y_pred: np.ndarray,
    channel_names: Sequence[str],
    y_true: Optional[np.ndarray] = None,
    first_index: int = 0,
) -> pd.DataFrame:
    """Long format, ordered by sample, then channel, then step"""
    M, T, V = y_pred.shape
    if len(channel_names) != V:
        raise DataError(f"{len(channel_names)} channel names for {V} predicted channels")
    # (M, T, V) -> (M, V, T) so rows iterate step fastest
    pred = np.transpose(y_pred, (0, 2, 1)).reshape(-1)
    truth = np.transpose(y_true, (0, 2, 1)).reshape(-1) if y_true is not None else np.full(pred.shape, np.nan)
    return pd.DataFrame({
        "sample_index": np.repeat(np.arange(first_index, first_index + M), V * T),
        "channel": np.tile(np.repeat(np.asarray(channel_names, dtype=object), T), M),
        "step": np.tile(np.arange(T), M * V),
        "y_true": truth,
        "y_pred": pred,
    }, columns=PREDICTION_COLUMNS)


def write_predictions(
    path: str | Path,
    y_pred: np.ndarray,
    channel_names: Sequence[str],
    y_true: Optional[np.ndarray] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prediction_frame(y_pred, channel_names, y_true).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {y_pred.shape[0]} forecasts to {path}")
    return path
