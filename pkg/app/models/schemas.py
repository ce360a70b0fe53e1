import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class AMode(str, Enum):
    """How the state transition A is shared across features"""
    FEATURE_INDEPENDENT = "feature_independent"
    FEATURE_SPECIFIC = "feature_specific"


class DMode(str, Enum):
    """How the skip connection D is produced"""
    FREE = "free"
    DATA_DEPENDENT = "data_dependent"


class MixupMode(str, Enum):
    CHANNEL = "channel"
    VANILLA_SAMPLE = "vanilla_sample"
    OFF = "off"


class LossKind(str, Enum):
    L1 = "l1"
    L2 = "l2"


class ChannelMixerKind(str, Enum):
    """Cross-channel module placed after each M-Mamba block"""
    GDD = "gdd"
    MLP = "mlp"
    NONE = "none"


class LrSchedule(str, Enum):
    CONSTANT = "constant"
    HALVING = "halving"


# Model configuration

class MambaBlockConfig(BaseModel):
    """Structural parameters of one M-Mamba block, including the four ablation flags"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(..., gt=0, description="Embedding size E")
    d_state: int = Field(16, gt=0, description="SSM state size S")
    expand: int = Field(1, gt=0, description="Inner width factor of the in-projection")
    dt_rank: Optional[int] = Field(None, gt=0, description="Rank of the step-size projection, ceil(E/16) when unset")
    use_conv: bool = False
    conv_kernel: int = Field(4, ge=1)
    use_z_branch: bool = True
    a_mode: AMode = AMode.FEATURE_INDEPENDENT
    d_mode: DMode = DMode.DATA_DEPENDENT
    dropout: float = Field(0.0, ge=0.0, lt=1.0, description="Kept for config echo; dropout is applied outside the block")

    @property
    def d_inner(self) -> int:
        return self.d_model * self.expand

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)


# Block ablation cases as (use_conv, use_z_branch, a_mode, d_mode), vanilla Mamba through CMamba
MAMBA_ABLATION_CASES: Dict[str, Dict[str, Any]] = {
    "vanilla": {"use_conv": True, "use_z_branch": True, "a_mode": AMode.FEATURE_SPECIFIC, "d_mode": DMode.FREE},
    "case1": {"use_conv": False, "use_z_branch": True, "a_mode": AMode.FEATURE_SPECIFIC, "d_mode": DMode.FREE},
    "case2": {"use_conv": True, "use_z_branch": False, "a_mode": AMode.FEATURE_SPECIFIC, "d_mode": DMode.FREE},
    "case3": {"use_conv": False, "use_z_branch": False, "a_mode": AMode.FEATURE_SPECIFIC, "d_mode": DMode.FREE},
    "case4": {"use_conv": True, "use_z_branch": True, "a_mode": AMode.FEATURE_INDEPENDENT, "d_mode": DMode.FREE},
    "case5": {"use_conv": True, "use_z_branch": True, "a_mode": AMode.FEATURE_INDEPENDENT, "d_mode": DMode.DATA_DEPENDENT},
    "cmamba": {"use_conv": False, "use_z_branch": True, "a_mode": AMode.FEATURE_INDEPENDENT, "d_mode": DMode.DATA_DEPENDENT},
}


class ModelConfig(BaseModel):
    """Shape and capacity of a CMamba forecaster"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    look_back: int = Field(..., gt=0)
    horizon: int = Field(..., gt=0)
    channels: int = Field(..., gt=0)
    patch_len: int = Field(16, gt=0)
    stride: int = Field(8, gt=0)
    d_model: int = Field(128, gt=0)
    num_blocks: int = Field(3, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    channel_mixer: ChannelMixerKind = ChannelMixerKind.GDD
    gdd_expansion: float = Field(1.0, gt=0.0)
    mixup_sigma: float = Field(1.0, ge=0.0)
    block: MambaBlockConfig

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.patch_len > self.look_back:
            raise ValueError(f"patch_len ({self.patch_len}) must not exceed look_back ({self.look_back})")
        if self.stride > self.patch_len:
            raise ValueError(f"stride ({self.stride}) must not exceed patch_len ({self.patch_len})")
        if self.block.d_model != self.d_model:
            raise ValueError(f"block d_model ({self.block.d_model}) differs from d_model ({self.d_model})")
        return self

    @property
    def num_patches(self) -> int:
        return (self.look_back - self.patch_len) // self.stride + 2

    @property
    def gdd_hidden(self) -> int:
        return max(1, round(self.gdd_expansion * self.channels))


class MixupConfig(BaseModel):
    """Training-time augmentation settings"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: MixupMode = MixupMode.CHANNEL
    sigma: float = Field(1.0, ge=0.0, description="Standard deviation of the channel coefficients")
    alpha: float = Field(1.0, gt=0.0, description="Beta(alpha, alpha) parameter of vanilla sample mixup")

    @property
    def enabled(self) -> bool:
        return self.mode != MixupMode.OFF


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(10, ge=1)
    patience: int = Field(3, ge=1)
    batch_size: int = Field(32, ge=1)
    loss: LossKind = LossKind.L1
    clip_norm: Optional[float] = Field(5.0, gt=0.0)
    lr_schedule: LrSchedule = LrSchedule.CONSTANT
    num_workers: int = Field(0, ge=0)


class ExperimentConfig(BaseModel):
    """Every knob needed to reproduce a run. Flat so it maps onto `key = value` files."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    # data
    dataset_path: str = Field("data/ETTh1.csv", description="CSV with an optional leading timestamp column")
    dataset_name: Optional[str] = Field(None, description="Defaults to the file stem")
    has_timestamp: bool = True
    split_ratios: Optional[Tuple[float, float, float]] = None
    look_back: int = Field(96, gt=0)
    horizon: int = Field(96, gt=0)

    # model
    patch_len: int = Field(16, gt=0)
    stride: int = Field(8, gt=0)
    d_model: int = Field(128, gt=0)
    num_blocks: int = Field(3, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    channel_mixer: ChannelMixerKind = ChannelMixerKind.GDD
    gdd_expansion: float = Field(1.0, gt=0.0)

    # block
    d_state: int = Field(16, gt=0)
    expand: int = Field(1, gt=0)
    dt_rank: Optional[int] = Field(None, gt=0)
    use_conv: bool = False
    conv_kernel: int = Field(4, ge=1)
    use_z_branch: bool = True
    a_mode: AMode = AMode.FEATURE_INDEPENDENT
    d_mode: DMode = DMode.DATA_DEPENDENT

    # mixup
    mixup_mode: MixupMode = MixupMode.CHANNEL
    mixup_sigma: float = Field(1.0, ge=0.0)
    vanilla_alpha: float = Field(1.0, gt=0.0)

    # optim
    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(10, ge=1)
    patience: int = Field(3, ge=1)
    batch_size: int = Field(32, ge=1)
    loss: LossKind = LossKind.L1
    clip_norm: Optional[float] = Field(5.0, gt=0.0)
    lr_schedule: LrSchedule = LrSchedule.CONSTANT
    num_workers: int = Field(0, ge=0)

    # run
    seed: int = 2020
    output_dir: Optional[str] = None

    @field_validator("split_ratios")
    @classmethod
    def _ratios_sum_to_one(cls, value):
        if value is None:
            return value
        if any(r < 0 for r in value):
            raise ValueError(f"split ratios must be non-negative, got {value}")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_geometry(self) -> "ExperimentConfig":
        if self.patch_len > self.look_back:
            raise ValueError(f"patch_len ({self.patch_len}) must not exceed look_back ({self.look_back})")
        if self.stride > self.patch_len:
            raise ValueError(f"stride ({self.stride}) must not exceed patch_len ({self.patch_len})")
        return self

    @property
    def resolved_dataset_name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        stem = self.dataset_path.replace("\\", "/").rsplit("/", 1)[-1]
        return stem.rsplit(".", 1)[0]

    @property
    def resolved_split_ratios(self) -> Tuple[float, float, float]:
        if self.split_ratios is not None:
            return self.split_ratios
        if self.resolved_dataset_name.upper().startswith("ETT"):
            return (0.6, 0.2, 0.2)
        return (0.7, 0.1, 0.2)

    def block_config(self) -> MambaBlockConfig:
        return MambaBlockConfig(
            d_model=self.d_model,
            d_state=self.d_state,
            expand=self.expand,
            dt_rank=self.dt_rank,
            use_conv=self.use_conv,
            conv_kernel=self.conv_kernel,
            use_z_branch=self.use_z_branch,
            a_mode=self.a_mode,
            d_mode=self.d_mode,
            dropout=self.dropout,
        )

    def model_config_for(self, channels: int) -> ModelConfig:
        return ModelConfig(
            look_back=self.look_back,
            horizon=self.horizon,
            channels=channels,
            patch_len=self.patch_len,
            stride=self.stride,
            d_model=self.d_model,
            num_blocks=self.num_blocks,
            dropout=self.dropout,
            channel_mixer=self.channel_mixer,
            gdd_expansion=self.gdd_expansion,
            mixup_sigma=self.mixup_sigma,
            block=self.block_config(),
        )

    def mixup_config(self) -> MixupConfig:
        return MixupConfig(mode=self.mixup_mode, sigma=self.mixup_sigma, alpha=self.vanilla_alpha)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr,
            epochs=self.epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            loss=self.loss,
            clip_norm=self.clip_norm,
            lr_schedule=self.lr_schedule,
            num_workers=self.num_workers,
        )


# Reports

class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    lr: float


class TrainReport(BaseModel):
    """Outcome of one training run. Test metrics come from the best-validation parameters."""
    seed: int
    epochs: List[EpochRecord]
    best_epoch: int
    best_val_loss: Optional[float] = None
    stopped_early: bool = False
    test_mse: Optional[float] = None
    test_mae: Optional[float] = None
    wall_time: float = Field(0.0, exclude=True, description="Seconds; logged, never written to the report file")

    def to_text(self) -> str:
        """Render as `key: value` lines; floats use repr so the file round-trips exactly"""
        lines = [
            f"seed: {self.seed}",
            f"best_epoch: {self.best_epoch}",
            f"best_val_loss: {_fmt(self.best_val_loss)}",
            f"stopped_early: {str(self.stopped_early).lower()}",
            f"test_mse: {_fmt(self.test_mse)}",
            f"test_mae: {_fmt(self.test_mae)}",
            f"epochs_run: {len(self.epochs)}",
        ]
        for record in self.epochs:
            lines.append(f"epoch_{record.epoch}_train_loss: {_fmt(record.train_loss)}")
            lines.append(f"epoch_{record.epoch}_val_loss: {_fmt(record.val_loss)}")
            lines.append(f"epoch_{record.epoch}_lr: {_fmt(record.lr)}")
        return "\n".join(lines) + "\n"


def _fmt(value: Optional[float]) -> str:
    return "none" if value is None else repr(float(value))


class FlopReport(BaseModel):
    """Analytic FLOP count of one forward pass (2 FLOPs per multiply-accumulate)"""
    batch: int
    total: int
    gdd_mlp_part: int = Field(..., description="The two shared channel networks only")
    gdd_module_total: int = Field(..., description="Everything removed when GDD-MLP is disabled")
    breakdown: Dict[str, int]

    @property
    def increment(self) -> float:
        base = self.total - self.gdd_module_total
        return self.gdd_module_total / base if base else 0.0


class AblationRow(BaseModel):
    label: str
    flags: Dict[str, Any]
    mse: Optional[float] = None
    mae: Optional[float] = None


# API payloads

class FlopRequest(BaseModel):
    """Request for a FLOP estimate"""
    config: ExperimentConfig
    channels: int = Field(..., gt=0, description="Number of series channels V")
    batch_size: Optional[int] = Field(None, gt=0, description="Defaults to the config batch size")


class FlopResponse(BaseModel):
    report: FlopReport
    increment_percent: float


class PredictionRow(BaseModel):
    sample_index: int
    channel: str
    step: int
    y_true: Optional[float] = None
    y_pred: float


class PredictionResponse(BaseModel):
    rows: List[PredictionRow]
    total_windows: int
    horizon: int


class HealthResponse(BaseModel):
    """Health check response"""
    status: str
    timestamp: str
    version: str
    checkpoint: Optional[str] = None


# Checkpoint manifest

class BlobEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Byte offset from the start of the data section")
    nbytes: int = Field(..., ge=0)


class CheckpointHeader(BaseModel):
    """Text header of a checkpoint file; blobs follow in declaration order"""
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig
    seed: int
    experiment: Optional[ExperimentConfig] = None
    channel_names: Optional[List[str]] = None
    parameters: List[BlobEntry]
    extras: List[BlobEntry] = Field(default_factory=list, description="Dataset normalization and other arrays")
