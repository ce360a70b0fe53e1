from typing import Tuple

import numpy as np

from app.engine.rng import Rng
from app.errors import ContractError, DomainError, ShapeError
from app.models.schemas import MixupConfig, MixupMode


def draw_channel_mix(channels: int, sigma: float, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """Permutation of the channels and one coefficient per channel, lambda ~ N(0, sigma^2)"""
    perm = rng.permutation(channels)
    lam = rng.normal((channels,), 0.0, sigma)
    return perm, lam


def apply_channel_mix(x: np.ndarray, y: np.ndarray, perm: np.ndarray, lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """x'[:, v] = x[:, v] + lam[v] * x[:, perm[v]], same for y"""
    return x + lam * x[:, perm], y + lam * y[:, perm]


def channel_mixup(
    x: np.ndarray,
    y: np.ndarray,
    cfg: MixupConfig,
    rng: Rng,
    training: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mix each channel with a randomly chosen one, sharing (perm, lambda) between x and y.

    x is (L, V) and y is (T, V). Only valid while training.
    """
    if not training:
        raise ContractError("channel mixup called outside training")
    if not cfg.enabled or cfg.mode != MixupMode.CHANNEL:
        raise ContractError(f"channel mixup called with mixup mode '{cfg.mode.value}'")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"channel mixup expects (L, V) and (T, V), got {x.shape} and {y.shape}")
    perm, lam = draw_channel_mix(x.shape[1], cfg.sigma, rng)
    return apply_channel_mix(x, y, perm, lam)


def vanilla_mixup(xi, yi, xj, yj, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Interpolate two samples: lam * sample_i + (1 - lam) * sample_j"""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"mixup coefficient must lie in [0, 1], got {lam}")
    xi, yi, xj, yj = (np.asarray(a, dtype=np.float64) for a in (xi, yi, xj, yj))
    if xi.shape != xj.shape or yi.shape != yj.shape:
        raise ShapeError(f"mixup samples differ in shape: {xi.shape}/{xj.shape}, {yi.shape}/{yj.shape}")
    return lam * xi + (1.0 - lam) * xj, lam * yi + (1.0 - lam) * yj


class MixupAugmenter:
    """Applies the configured mixup to training batches and counts its invocations"""

    def __init__(self, cfg: MixupConfig):
        self.cfg = cfg
        self.calls = 0

    @property
    def active(self) -> bool:
        return self.cfg.enabled

    def apply_batch(self, x: np.ndarray, y: np.ndarray, rng: Rng, training: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Augment a (B, L, V) / (B, T, V) batch sample by sample"""
        if not training:
            raise ContractError("augmentation called outside training")
        if not self.active:
            return x, y
        self.calls += 1
        x_out = np.empty_like(x)
        y_out = np.empty_like(y)
        if self.cfg.mode == MixupMode.CHANNEL:
            for i in range(x.shape[0]):
                x_out[i], y_out[i] = channel_mixup(x[i], y[i], self.cfg, rng)
        else:
            partners = rng.permutation(x.shape[0])
            lams = rng.beta(self.cfg.alpha, self.cfg.alpha, x.shape[0])
            for i, j in enumerate(partners):
                x_out[i], y_out[i] = vanilla_mixup(x[i], y[i], x[j], y[j], float(lams[i]))
        return x_out, y_out
