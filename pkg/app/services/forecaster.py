"""The CMamba forecaster: normalize, patch, embed, encode, project, denormalize."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from app.engine.module import Linear, Module, parameter
from app.engine.rng import Rng
from app.engine.tensor import Tensor, as_tensor, dropout, no_grad, take
from app.errors import ShapeError
from app.layers.channel_mixer import build_channel_mixer
from app.layers.ssm import MambaBlock
from app.models.schemas import ModelConfig

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
POS_INIT_RANGE = 0.02

# child stream keys of the model seed
_INIT_KEY = 0
_DROPOUT_KEY = 1


@dataclass
class NormStats:
    """Per-sample, per-channel statistics of the look-back window, both (B, V)"""
    mean: Tensor
    std: Tensor


def instance_norm(x: Union[Tensor, np.ndarray], eps: float = NORM_EPS) -> Tuple[Tensor, NormStats]:
    """Z-score each (sample, channel) over the look-back axis with population variance"""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"instance_norm expects (B, L, V) with L >= 1, got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = ((centered * centered).mean(axis=1, keepdims=True) + eps).sqrt()
    B, _, V = x.shape
    return centered / std, NormStats(mean=mean.reshape(B, V), std=std.reshape(B, V))


def denormalize(y: Tensor, stats: NormStats) -> Tensor:
    """Invert instance_norm on a (B, T, V) tensor"""
    B, V = stats.mean.shape
    return y * stats.std.reshape(B, 1, V) + stats.mean.reshape(B, 1, V)


def num_patches(look_back: int, patch_len: int, stride: int) -> int:
    if patch_len > look_back:
        raise ShapeError(f"patch_len {patch_len} exceeds look_back {look_back}")
    return (look_back - patch_len) // stride + 2


def patch_indices(look_back: int, patch_len: int, stride: int) -> np.ndarray:
    """(N, P) source positions; reads past the end repeat the last step"""
    n = num_patches(look_back, patch_len, stride)
    offsets = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    return np.minimum(offsets, look_back - 1)


def patching(x_norm: Tensor, patch_len: int, stride: int) -> Tensor:
    """(B, L, V) -> (B, V, N, P) with the series right-padded by `stride` copies of its last value"""
    x_norm = as_tensor(x_norm)
    if x_norm.ndim != 3:
        raise ShapeError(f"patching expects (B, L, V), got {x_norm.shape}")
    index = patch_indices(x_norm.shape[1], patch_len, stride)
    return take(x_norm.transpose(0, 2, 1), index, axis=2)


class CMambaBlock(Module):
    """Z_l = mixer(MMamba(Z_{l-1})) + Z_{l-1}"""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.mamba = MambaBlock(config.block, rng)
        self.mixer = build_channel_mixer(config.channel_mixer, config.channels, config.gdd_expansion, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.mixer(self.mamba(z)) + z


class CMambaModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 2020):
        self.config = config
        self.seed = seed
        init = Rng(seed, (_INIT_KEY,))
        E, N = config.d_model, config.num_patches
        self.patch_proj = Linear(config.patch_len, E, init)
        self.pos_embedding = parameter(init.uniform((N, E), -POS_INIT_RANGE, POS_INIT_RANGE))
        self.blocks = [CMambaBlock(config, init) for _ in range(config.num_blocks)]
        self.head = Linear(N * E, config.horizon, init)
        self._dropout_rng = Rng(seed, (_DROPOUT_KEY,))
        logger.debug(f"Built CMamba with {self.num_parameters()} parameters, N={N}, E={E}")

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.look_back, cfg.channels):
            raise ShapeError(f"model expects (B, {cfg.look_back}, {cfg.channels}), got {x.shape}")

    def _dropout(self, z: Tensor, training: bool, rng: Optional[Rng]) -> Tensor:
        if not training or self.config.dropout <= 0.0:
            return z
        return dropout(z, self.config.dropout, rng or self._dropout_rng)

    def embed(self, x, training: Optional[bool] = None, rng: Optional[Rng] = None) -> Tuple[Tensor, NormStats]:
        """Normalized input -> Z_0 of shape (B, V, N, E)"""
        x = as_tensor(x)
        self._check_input(x)
        training = self.training if training is None else training
        x_norm, stats = instance_norm(x)
        z0 = self.patch_proj(patching(x_norm, self.config.patch_len, self.config.stride)) + self.pos_embedding
        return self._dropout(z0, training, rng), stats

    def encode(self, z: Tensor, training: Optional[bool] = None, rng: Optional[Rng] = None) -> Tensor:
        training = self.training if training is None else training
        for block in self.blocks:
            z = self._dropout(block(z), training, rng)
        return z

    def project(self, z: Tensor, stats: NormStats) -> Tensor:
        B, V, N, E = z.shape
        out = self.head(z.silu().reshape(B, V, N * E))
        return denormalize(out.transpose(0, 2, 1), stats)

    def forward(self, x, training: Optional[bool] = None, rng: Optional[Rng] = None) -> Tensor:
        """(B, L, V) -> (B, T, V)"""
        z, stats = self.embed(x, training, rng)
        return self.project(self.encode(z, training, rng), stats)


def model_forward(x, model: CMambaModel, training: bool, rng: Optional[Rng] = None) -> Tensor:
    return model(x, training=training, rng=rng)


def predict(model: CMambaModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode forecasts for a (M, L, V) array, without recording"""
    outputs: List[np.ndarray] = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            outputs.append(model(x[start:start + batch_size], training=False).numpy())
    if not outputs:
        return np.zeros((0, model.config.horizon, model.config.channels))
    return np.concatenate(outputs, axis=0)
