from enum import IntEnum, StrEnum


class Region(StrEnum):
    """Body regions used by the region position errors.

    >>> Region

    """

    hand: str = "hand"
    upper: str = "upper"
    lower: str = "lower"


class Split(StrEnum):
    """Dataset split tags.

    >>> Split

    """

    train: str = "train"
    val: str = "val"
    test: str = "test"


class RootStyle(StrEnum):
    """Root trajectory styles of the motion generator.

    >>> RootStyle

    """

    walk: str = "walk"
    stationary: str = "stationary"


class ViewAxis(StrEnum):
    """Head axis treated as the camera forward direction.

    >>> ViewAxis

    """

    positive_z: str = "+z"
    negative_z: str = "-z"


class Detector(StrEnum):
    """Hand detector emulation modes.

    >>> Detector

    """

    gaussian: str = "gaussian"
    reprojection: str = "reprojection"


class UncertaintyKind(StrEnum):
    """Ensemble uncertainty estimators.

    >>> UncertaintyKind

    """

    aleatoric: str = "aleatoric"
    epistemic: str = "epistemic"
    total: str = "total"


class Strategy(StrEnum):
    """Uncertainty guidance strategies.

    >>> Strategy

    """

    none: str = "none"
    sample: str = "sample"
    dropout: str = "dropout"
    dist_embed: str = "dist-embed"


class InputMode(StrEnum):
    """Input regimes of the end-to-end pipeline.

    >>> InputMode

    """

    head_only: str = "head_only"
    doubly_sparse: str = "doubly_sparse"
    dense_hands: str = "dense_hands"


class ReconLoss(StrEnum):
    """Reconstruction losses available to the tokenizer.

    >>> ReconLoss

    """

    l2: str = "l2"
    wing: str = "wing"


class ScheduleKind(StrEnum):
    """Transition schedule families.

    >>> ScheduleKind

    """

    linear: str = "linear"
    explicit: str = "explicit"


class Artifacts(StrEnum):
    """Names of the artifacts written under the workspace.

    >>> Artifacts

    """

    manifest: str = "manifest.json"
    run_manifest: str = "run_manifest.json"
    data: str = "data"
    checkpoints: str = "checkpoints"
    imputer: str = "imputer"
    tokenizer: str = "tokenizer"
    denoiser: str = "denoiser"
    imputed: str = "imputed"
    predictions: str = "predictions"
    reports: str = "reports"
    plots: str = "plots"
    report_json: str = "report.json"
    report_text: str = "report.txt"


class Templates(StrEnum):
    """Jinja2 template filenames.

    >>> Templates

    """

    report: str = "report.txt.j2"


class ExitCode(IntEnum):
    """Process exit codes of the command line interface.

    >>> ExitCode

    """

    success: int = 0
    config: int = 2
    missing_artifact: int = 3
    numeric: int = 4
