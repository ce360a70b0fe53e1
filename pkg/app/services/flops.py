"""Analytic FLOP count of one CMamba forward pass.

Convention: a multiply-accumulate is 2 FLOPs, every other elementwise
operation (add, activation, exp, comparison in max pooling) is 1 FLOP.
Dropout is not counted since evaluation runs without it.
"""
import logging
from typing import Dict, Union

from app.models.schemas import ChannelMixerKind, DMode, FlopReport, MambaBlockConfig, ModelConfig

logger = logging.getLogger(__name__)


def _mamba_lane(block: MambaBlockConfig, n: int) -> Dict[str, int]:
    """Cost of one M-Mamba block on one (sample, channel) lane of n tokens"""
    E, Ei, S, R = block.d_model, block.d_inner, block.d_state, block.resolved_dt_rank
    cost = {
        "in_proj": n * 2 * E * Ei * (2 if block.use_z_branch else 1),
        "conv": n * Ei * (2 * block.conv_kernel + 1) if block.use_conv else 0,
        "activations": n * Ei + (2 * n * Ei if block.use_z_branch else 0),
        "proj_bc": 2 * n * 2 * Ei * S,
        # down/up projection, bias, softplus
        "proj_dt": n * (2 * Ei * R + 2 * R * Ei + 2 * Ei),
        "proj_d": n * (2 * Ei * Ei + Ei) if block.d_mode == DMode.DATA_DEPENDENT else 0,
        # dt*A, exp, expm1 ratio (2), two products for B_bar
        "discretize": 5 * n * Ei * S,
        # A_bar*h + B_bar*u, then C.h, then D*u added
        "scan": 3 * n * Ei * S + 2 * n * Ei * S + 2 * n * Ei,
        "out_proj": n * 2 * Ei * E,
    }
    return cost


def gdd_mlp_flops(channels: int, hidden: int, n: int) -> int:
    """Two shared networks, each run on the mean and the max descriptor of every patch"""
    per_call = 2 * channels * hidden + 2 * hidden + 2 * hidden * channels
    return 2 * 2 * n * per_call


def gdd_module_flops(channels: int, hidden: int, n: int, e: int) -> Dict[str, int]:
    return {
        "gdd_mlp": gdd_mlp_flops(channels, hidden, n),
        # sum + divide for the mean, comparisons for the max
        "gdd_pooling": 2 * channels * n * e + channels * n,
        # output biases of the four calls, adding the two descriptors, two sigmoids
        "gdd_gates": 4 * n * channels + 2 * n * channels + 2 * n * channels,
        "gdd_apply": 2 * channels * n * e,
    }


def plain_mlp_flops(channels: int, hidden: int, n: int, e: int) -> int:
    return n * e * (2 * channels * hidden + 2 * hidden + 2 * hidden * channels + channels)


def estimate_flops(model_or_config, batch: int) -> FlopReport:
    """Count FLOPs of a forward pass on `batch` samples"""
    config: ModelConfig = getattr(model_or_config, "config", model_or_config)
    if batch < 1:
        raise ValueError(f"batch must be positive, got {batch}")
    V, L, T = config.channels, config.look_back, config.horizon
    P, N, E, k = config.patch_len, config.num_patches, config.d_model, config.num_blocks
    lanes = batch * V

    breakdown: Dict[str, int] = {
        # mean, centering, square, variance, eps + sqrt, divide
        "instance_norm": lanes * (5 * L + 2),
        "embedding": lanes * N * (2 * P * E + 2 * E),
    }
    for name, value in _mamba_lane(config.block, N).items():
        breakdown[f"mamba_{name}"] = k * lanes * value
    breakdown["residual"] = k * lanes * N * E

    gdd_mlp_part = 0
    gdd_module_total = 0
    if config.channel_mixer == ChannelMixerKind.GDD:
        for name, value in gdd_module_flops(V, config.gdd_hidden, N, E).items():
            breakdown[name] = k * batch * value
        gdd_mlp_part = breakdown["gdd_mlp"]
        gdd_module_total = sum(v for name, v in breakdown.items() if name.startswith("gdd_"))
    elif config.channel_mixer == ChannelMixerKind.MLP:
        breakdown["plain_mlp"] = k * batch * plain_mlp_flops(V, config.gdd_hidden, N, E)

    breakdown["head"] = lanes * (N * E + 2 * N * E * T + T)
    breakdown["denorm"] = lanes * 2 * T

    report = FlopReport(
        batch=batch,
        total=sum(breakdown.values()),
        gdd_mlp_part=gdd_mlp_part,
        gdd_module_total=gdd_module_total,
        breakdown=breakdown,
    )
    logger.info(f"FLOPs for batch {batch}: total {report.total:,}, GDD-MLP increment {100 * report.increment:.3f}%")
    return report
