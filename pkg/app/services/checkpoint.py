"""Checkpoint files.

Layout:
    CMAMBA-CKPT v1\n
    <header length in bytes>\n
    <JSON header: config echo, parameter names/shapes/byte offsets>
    <little-endian float64 blobs, parameters then extras, in declaration order>
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.errors import ConfigError
from app.models.schemas import BlobEntry, CheckpointHeader, ExperimentConfig
from app.services.forecaster import CMambaModel

logger = logging.getLogger(__name__)

MAGIC = "CMAMBA-CKPT v1"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: CMambaModel
    experiment: Optional[ExperimentConfig] = None
    channel_names: Optional[List[str]] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def data_stats(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Global normalization (mean, std) of the training data, when stored"""
        if "data_mean" in self.extras and "data_std" in self.extras:
            return self.extras["data_mean"], self.extras["data_std"]
        return None


def _entries(arrays: Dict[str, np.ndarray], start: int) -> Tuple[List[BlobEntry], int]:
    entries = []
    offset = start
    for name, value in arrays.items():
        nbytes = value.size * _DTYPE.itemsize
        entries.append(BlobEntry(name=name, shape=list(value.shape), offset=offset, nbytes=nbytes))
        offset += nbytes
    return entries, offset


def save_checkpoint(
    path: str | Path,
    model: CMambaModel,
    experiment: Optional[ExperimentConfig] = None,
    channel_names: Optional[List[str]] = None,
    extras: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    path = Path(path)
    state = model.state_dict()
    extras = {name: np.asarray(value, dtype=np.float64) for name, value in (extras or {}).items()}
    param_entries, end = _entries(state, 0)
    extra_entries, _ = _entries(extras, end)
    header = CheckpointHeader(
        model=model.config,
        seed=model.seed,
        experiment=experiment,
        channel_names=channel_names,
        parameters=param_entries,
        extras=extra_entries,
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"{MAGIC}\n{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        for value in list(state.values()) + list(extras.values()):
            f.write(np.ascontiguousarray(value, dtype=_DTYPE).tobytes())
    logger.info(f"Saved checkpoint with {len(param_entries)} parameters to {path}")
    return path


def _read_blob(data: bytes, entry: BlobEntry) -> np.ndarray:
    if entry.offset + entry.nbytes > len(data):
        raise ConfigError(f"checkpoint is truncated at blob '{entry.name}'")
    blob = np.frombuffer(data, dtype=_DTYPE, count=entry.nbytes // _DTYPE.itemsize, offset=entry.offset)
    return blob.astype(np.float64).reshape(entry.shape)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first].decode("ascii", "replace") != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    try:
        length = int(raw[first + 1:second])
        header = CheckpointHeader(**json.loads(raw[second + 1:second + 1 + length]))
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"corrupt checkpoint header in {path}: {e}") from e
    data = raw[second + 1 + length:]

    model = CMambaModel(header.model, seed=header.seed)
    model.load_state_dict({entry.name: _read_blob(data, entry) for entry in header.parameters})
    extras = {entry.name: _read_blob(data, entry) for entry in header.extras}
    logger.info(f"Loaded checkpoint {path} (V={header.model.channels}, T={header.model.horizon})")
    return Checkpoint(model=model, experiment=header.experiment, channel_names=header.channel_names, extras=extras)
