import os
import pathlib
from typing import Any, Dict, List, Literal, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    Field,
    FilePath,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings

from pyegopose.modules import enums

SCHEMA_VERSION = 1
HEAD_DIM = 18
HAND_JOINTS = 21
MIN_JOINTS = 20


class PinholeCamera(BaseModel):
    """Pinhole intrinsics of the head-mounted camera.

    >>> PinholeCamera

    """

    fx: PositiveFloat = 600.0
    fy: PositiveFloat = 600.0
    cx: float = 640.0
    cy: float = 480.0
    width: PositiveInt = 1280
    height: PositiveInt = 960

    @model_validator(mode="after")
    def principal_point_inside(self) -> "PinholeCamera":
        """Ensures the principal point lies within the image bounds."""
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        return self

    @property
    def intrinsics(self) -> np.ndarray:
        """Intrinsic matrix with zero skew."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class AmplitudeLimits(BaseModel):
    """Joint angle amplitude limits in degrees.

    >>> AmplitudeLimits

    """

    spine: NonNegativeFloat = 6.0
    head: NonNegativeFloat = 12.0
    arm: NonNegativeFloat = 25.0
    leg: NonNegativeFloat = 30.0
    hand_raise: NonNegativeFloat = 80.0


class GeneratorConfig(BaseModel):
    """Settings of the synthetic motion generator.

    >>> GeneratorConfig

    """

    joint_count: int = 22
    frames: int = 240
    fps: float = 30.0
    amplitude: AmplitudeLimits = Field(default_factory=AmplitudeLimits)
    min_frequency_hz: PositiveFloat = 0.15
    max_frequency_hz: PositiveFloat = 1.2
    root_style: enums.RootStyle = enums.RootStyle.walk
    walk_speed: NonNegativeFloat = 1.0
    gait_frequency_hz: PositiveFloat = 0.9
    raise_rate_hz: NonNegativeFloat = 0.07
    raise_duration_s: Tuple[PositiveFloat, PositiveFloat] = (0.8, 2.2)
    raise_ramp_s: PositiveFloat = 0.3

    # noinspection PyMethodParameters
    @field_validator("joint_count", "frames", "fps", mode="after")
    def positive(cls, value: int | float) -> int | float:
        """Rejects non-positive sizes and rates."""
        if value <= 0:
            raise ValueError(f"must be positive, received {value}")
        return value

    # noinspection PyMethodParameters
    @field_validator("joint_count", mode="after")
    def enough_joints(cls, value: int) -> int:
        """The synthetic body needs at least one spine segment."""
        if value < MIN_JOINTS:
            raise ValueError(f"synthetic body needs at least {MIN_JOINTS} joints")
        return value


class DataConfig(BaseModel):
    """Dataset construction, visibility and detector settings.

    >>> DataConfig

    """

    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    split_sizes: Dict[enums.Split, PositiveInt] = Field(
        default_factory=lambda: {
            enums.Split.train: 80,
            enums.Split.val: 10,
            enums.Split.test: 10,
        }
    )
    split_seeds: Dict[enums.Split, int] = Field(
        default_factory=lambda: {
            enums.Split.train: 0,
            enums.Split.val: 10_000,
            enums.Split.test: 20_000,
        }
    )
    hand_mode: Literal[3, 9] = 9
    half_angle_deg: float = Field(45.0, gt=0, lt=180)
    view_axis: enums.ViewAxis = enums.ViewAxis.positive_z
    detector: enums.Detector = enums.Detector.gaussian
    noise_sigma_m: NonNegativeFloat = 0.06
    pixel_noise: NonNegativeFloat = 1.0
    init_depth: PositiveFloat = 1.0
    camera: PinholeCamera = Field(default_factory=PinholeCamera)

    @model_validator(mode="after")
    def every_split(self) -> "DataConfig":
        """Split sizes and first seeds are given for train, val and test."""
        for field in (self.split_sizes, self.split_seeds):
            if missing := [str(split) for split in enums.Split if split not in field]:
                raise ValueError(f"missing splits {missing}")
        return self

    def seeds(self, split: enums.Split) -> List[int]:
        """Seeds of every sequence in a split."""
        start = self.split_seeds[split]
        return list(range(start, start + self.split_sizes[split]))


class ImputerConfig(BaseModel):
    """Architecture and training settings of the masked autoencoder ensemble.

    >>> ImputerConfig

    """

    window: PositiveInt = 40
    d_model: PositiveInt = 128
    heads: PositiveInt = 4
    encoder_layers: PositiveInt = 4
    decoder_layers: PositiveInt = 2
    ff_mult: PositiveInt = 4
    members: PositiveInt = 4
    beta: float = Field(0.5, ge=0, le=1)
    learning_rate: PositiveFloat = 5e-4
    weight_decay: NonNegativeFloat = 1e-4
    epochs: PositiveInt = 30
    batch_size: PositiveInt = 64
    window_stride: PositiveInt = 4
    seed: int = 0
    variance_floor: PositiveFloat = 1e-6

    @model_validator(mode="after")
    def heads_divide(self) -> "ImputerConfig":
        """Token dimension must split evenly across attention heads."""
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self


class TokenizerConfig(BaseModel):
    """Architecture and training settings of the motion tokenizer.

    >>> TokenizerConfig

    """

    window: PositiveInt = 40
    codebook_size: int = Field(128, ge=2)
    code_dim: PositiveInt = 128
    hidden: PositiveInt = 128
    depth: PositiveInt = 2
    lambda_vq: NonNegativeFloat = 0.25
    velocity_weight: NonNegativeFloat = 10.0
    acceleration_weight: NonNegativeFloat = 10.0
    recon_loss: enums.ReconLoss = enums.ReconLoss.l2
    wing_width: PositiveFloat = 5.0
    wing_curvature: PositiveFloat = 4.0
    ema_decay: float = Field(0.99, gt=0, lt=1)
    dead_code_steps: PositiveInt = 256
    learning_rate: PositiveFloat = 2e-4
    epochs: PositiveInt = 60
    batch_size: PositiveInt = 64
    window_stride: PositiveInt = 4
    seed: int = 0


class ScheduleConfig(BaseModel):
    """Mask-and-replace transition schedule settings.

    >>> ScheduleConfig

    See Also:
        - ``linear`` interpolates the cumulative keep and mask probabilities between the bounds.
        - ``explicit`` takes per-step ``betas`` and ``gammas`` verbatim.
    """

    kind: enums.ScheduleKind = enums.ScheduleKind.linear
    alpha_bar_start: float = Field(0.99999, gt=0, le=1)
    alpha_bar_end: float = Field(5e-11, gt=0, le=1)
    gamma_bar_start: float = Field(1e-6, ge=0, lt=1)
    gamma_bar_end: float = Field(1 - 1e-10, ge=0, lt=1)
    betas: List[NonNegativeFloat] = Field(default_factory=list)
    gammas: List[NonNegativeFloat] = Field(default_factory=list)


class DiffusionConfig(BaseModel):
    """Architecture and training settings of the discrete diffusion denoiser.

    >>> DiffusionConfig

    """

    steps: PositiveInt = 100
    inference_steps: PositiveInt | None = None
    d_model: PositiveInt = 128
    heads: PositiveInt = 4
    layers: PositiveInt = 4
    ff_mult: PositiveInt = 4
    denoise_weight: NonNegativeFloat = 1e-3
    learning_rate: PositiveFloat = 3e-4
    epochs: PositiveInt = 60
    batch_size: PositiveInt = 64
    window_stride: PositiveInt = 4
    hand_dropout: float = Field(0.1, ge=0, le=1)
    train_strategy: enums.Strategy = enums.Strategy.sample
    train_uncertainty: enums.UncertaintyKind = enums.UncertaintyKind.aleatoric
    seed: int = 0
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)

    @model_validator(mode="after")
    def heads_divide(self) -> "DiffusionConfig":
        """Token dimension must split evenly across attention heads."""
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self


class GuidanceConfig(BaseModel):
    """Inference-time guidance settings.

    >>> GuidanceConfig

    """

    strategy: enums.Strategy = enums.Strategy.sample
    uncertainty: enums.UncertaintyKind = enums.UncertaintyKind.aleatoric
    n_samples: PositiveInt = 1
    invert_dropout: bool = False


class EvaluationConfig(BaseModel):
    """Sliding-window inference and report settings.

    >>> EvaluationConfig

    """

    stride: PositiveInt = 20
    modes: List[enums.InputMode] = Field(default_factory=lambda: list(enums.InputMode))
    bootstrap_resamples: PositiveInt = 1000
    confidence: float = Field(0.95, gt=0, lt=1)
    batch_windows: PositiveInt = 256


class EnvConfig(BaseSettings):
    """Object to load the effective configuration.

    >>> EnvConfig

    """

    seed: int = 0
    workspace: pathlib.Path = pathlib.Path("artifacts")
    log_config: Dict[str, Any] | FilePath | None = None
    deterministic: bool = True
    device: str = "cpu"
    progress: bool = True
    threads: PositiveInt = max(1, (os.cpu_count() or 1) // 2)

    data: DataConfig = Field(default_factory=DataConfig)
    imputer: ImputerConfig = Field(default_factory=ImputerConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def windows_agree(self) -> "EnvConfig":
        """Imputer, tokenizer and denoiser share one window length."""
        if self.imputer.window != self.tokenizer.window:
            raise ValueError("imputer.window and tokenizer.window must match")
        if self.imputer.window > self.data.generator.frames:
            raise ValueError("window longer than the generated sequences")
        if self.tokenizer.code_dim != self.diffusion.d_model:
            raise ValueError("tokenizer.code_dim must equal diffusion.d_model")
        return self

    @classmethod
    def from_env_file(cls, env_file: pathlib.Path) -> "EnvConfig":
        """Create Settings instance from environment file.

        Args:
            env_file: Name of the env file.

        Returns:
            EnvConfig:
            Loads the ``EnvConfig`` model.
        """
        # noinspection PyArgumentList
        return cls(_env_file=env_file)

    class Config:
        """Extra configuration for EnvConfig object."""

        extra = "ignore"
        env_prefix = "PYEGOPOSE_"
        env_nested_delimiter = "__"
