from typing import Dict, List

from pydantic import BaseModel, Field, NonNegativeInt, PositiveInt

from pyegopose.modules import enums
from pyegopose.modules.models import SCHEMA_VERSION


class MetricRecord(BaseModel):
    """Pose errors of one predicted sequence against its ground truth.

    >>> MetricRecord

    """

    mpjpe: float
    mpjve: float
    mpjre: float
    hand_pe: float | None = None
    upper_pe: float | None = None
    lower_pe: float | None = None


class Interval(BaseModel):
    """Mean with a bootstrap confidence interval.

    >>> Interval

    """

    mean: float
    low: float
    high: float


class SequenceRow(BaseModel):
    """Per-sequence metrics of one report row.

    >>> SequenceRow

    """

    label: str
    seed: int
    metrics: MetricRecord


class ReportRow(BaseModel):
    """Aggregated metrics of one regime or baseline.

    >>> ReportRow

    """

    label: str
    sequences: PositiveInt
    metrics: Dict[str, Interval]


class ImputationRow(BaseModel):
    """Hand position error of an imputation method on invisible frames, in cm.

    >>> ImputationRow

    """

    label: str
    frames: NonNegativeInt
    error: Interval


class CalibrationRow(BaseModel):
    """Fraction of ground-truth hand coordinates inside the uncertainty bands.

    >>> CalibrationRow

    """

    kind: enums.UncertaintyKind
    coordinates: NonNegativeInt
    within_one_sigma: float
    within_two_sigma: float


class VisibilityStats(BaseModel):
    """Visible-hand histogram over frames.

    >>> VisibilityStats

    """

    frames: NonNegativeInt
    histogram: Dict[int, float]
    ratio: float


class TimingRow(BaseModel):
    """Diffusion sampling wall time.

    >>> TimingRow

    """

    label: str
    steps: PositiveInt
    seconds_per_window: float


class EvaluationReport(BaseModel):
    """Schema-versioned evaluation report.

    >>> EvaluationReport

    """

    schema_version: int = SCHEMA_VERSION
    config_hash: str
    split: enums.Split
    stride: PositiveInt
    strategy: enums.Strategy
    uncertainty: enums.UncertaintyKind
    n_samples: PositiveInt
    rows: List[ReportRow] = Field(default_factory=list)
    sequences: List[SequenceRow] = Field(default_factory=list)
    imputation: List[ImputationRow] = Field(default_factory=list)
    calibration: List[CalibrationRow] = Field(default_factory=list)
    visibility: VisibilityStats
    timing: List[TimingRow] = Field(default_factory=list)


class HostSummary(BaseModel):
    """Host description recorded with every run.

    >>> HostSummary

    """

    platform: str
    python: str
    cpu_count: int
    memory_total: str
    torch: str


class RunManifest(BaseModel):
    """Record written by every command to reproduce its outputs.

    >>> RunManifest

    """

    schema_version: int = SCHEMA_VERSION
    command: str
    version: str
    config: dict
    config_hash: str
    seeds: Dict[str, int]
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    host: HostSummary
    metrics: Dict[str, float] = Field(default_factory=dict)
    elapsed: str = ""
