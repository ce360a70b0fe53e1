"""Cross-channel mixing placed after each M-Mamba block.

GddMlp squeezes every patch embedding to two scalars (mean and max over E),
lets two shared MLPs mix those descriptors along the channel axis, and turns
the result into a sigmoid weight and bias per (batch, channel, patch).
"""
from typing import Tuple

from app.engine.module import Linear, Module
from app.engine.rng import Rng
from app.engine.tensor import Tensor
from app.errors import ShapeError
from app.models.schemas import ChannelMixerKind


def gdd_hidden_width(channels: int, expansion: float) -> int:
    return max(1, round(expansion * channels))


class ChannelMLP(Module):
    """V -> h -> V with ReLU in between; acts on the last axis"""

    def __init__(self, channels: int, hidden: int, rng: Rng, zero_last: bool = True):
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        if zero_last:
            self.fc2.zero_()

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


def _check_input(h: Tensor, channels: int) -> None:
    if h.ndim != 4:
        raise ShapeError(f"channel mixer expects (B, V, N, E), got {h.shape}")
    if h.shape[1] != channels:
        raise ShapeError(f"channel mixer built for V={channels}, got input {h.shape}")


class GddMlp(Module):
    """Global data-dependent MLP: out = Weight * h + Bias, broadcast along E"""

    def __init__(self, channels: int, expansion: float, rng: Rng):
        self.channels = channels
        self.hidden = gdd_hidden_width(channels, expansion)
        self.weight_branch = ChannelMLP(channels, self.hidden, rng)
        self.bias_branch = ChannelMLP(channels, self.hidden, rng)

    def gates(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        """Weight and Bias, both (B, V, N) and strictly inside (0, 1)"""
        _check_input(h, self.channels)
        # (B, V, N, E) -> (B, V, N) -> (B, N, V)
        avg = h.mean(axis=-1).transpose(0, 2, 1)
        peak = h.max(axis=-1).transpose(0, 2, 1)
        weight = (self.weight_branch(avg) + self.weight_branch(peak)).sigmoid()
        bias = (self.bias_branch(avg) + self.bias_branch(peak)).sigmoid()
        return weight.transpose(0, 2, 1), bias.transpose(0, 2, 1)

    def forward(self, h: Tensor) -> Tensor:
        weight, bias = self.gates(h)
        B, V, N, _ = h.shape
        return weight.reshape(B, V, N, 1) * h + bias.reshape(B, V, N, 1)


class PlainMlpMixer(Module):
    """Position-dependent two-layer MLP along V, the non-data-dependent baseline"""

    def __init__(self, channels: int, expansion: float, rng: Rng):
        self.channels = channels
        self.mlp = ChannelMLP(channels, gdd_hidden_width(channels, expansion), rng, zero_last=False)

    def forward(self, h: Tensor) -> Tensor:
        _check_input(h, self.channels)
        # move V last, mix, move back
        mixed = self.mlp(h.transpose(0, 2, 3, 1))
        return mixed.transpose(0, 3, 1, 2)


class IdentityMixer(Module):
    def forward(self, h: Tensor) -> Tensor:
        return h


def build_channel_mixer(kind: ChannelMixerKind, channels: int, expansion: float, rng: Rng) -> Module:
    kind = ChannelMixerKind(kind)
    if kind == ChannelMixerKind.GDD:
        return GddMlp(channels, expansion, rng)
    if kind == ChannelMixerKind.MLP:
        return PlainMlpMixer(channels, expansion, rng)
    return IdentityMixer()
