import logging
import pathlib
from typing import List, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from pyegopose.features import windows  # noqa: E402
from pyegopose.modules.exceptions import raise_shape_error  # noqa: E402
from pyegopose.modules.structures import ImputedTrajectory  # noqa: E402

LOGGER = logging.getLogger("pyegopose")
SIDES = ("left", "right")
AXES = ("x", "y", "z")
FORMATS = ("svg", "png")


def invisible_runs(visible: np.ndarray) -> List[Tuple[int, int]]:
    """Half-open frame ranges where a hand is not visible.

    Args:
        visible: Boolean visibility of one hand (T,).

    Returns:
        List[Tuple[int, int]]:
        Start and stop frame of every invisible run.
    """
    hidden = np.concatenate([[False], ~np.asarray(visible, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(hidden.astype(np.int8)))
    return [(int(start), int(stop)) for start, stop in zip(edges[::2], edges[1::2])]


def band_limits(mean: np.ndarray, uncertainty: np.ndarray, width: float) -> Tuple[np.ndarray, np.ndarray]:
    """Lower and upper edges of a band ``width`` standard deviations around the mean."""
    sigma = np.sqrt(uncertainty)
    return mean - width * sigma, mean + width * sigma


def emit_plots(
    imputed: ImputedTrajectory,
    ground_truth: np.ndarray,
    mask: np.ndarray,
    directory: pathlib.Path,
    name: str = "imputed",
) -> List[pathlib.Path]:
    """Plots imputed hand positions with their uncertainty bands.

    Args:
        imputed: Imputed trajectory of one sequence.
        ground_truth: Ground-truth hand states (T, 2, D_hand).
        mask: Hand visibility (T, 2); invisible frames are shaded gray.
        directory: Output directory, created if absent.
        name: File name stem.

    See Also:
        One figure per hand with a panel per position coordinate: the mean, the bands one and two
        standard deviations wide and the ground truth.

    Returns:
        List[pathlib.Path]:
        Written SVG and PNG files.

    Raises:
        ShapeError:
        If the ground truth or the mask do not cover the imputed frames.
    """
    frames = len(imputed)
    if ground_truth.shape[:2] != (frames, 2):
        raise_shape_error("ground_truth", (frames, 2), ground_truth.shape[:2])
    if mask.shape != (frames, 2):
        raise_shape_error("mask", (frames, 2), mask.shape)
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    time = np.arange(frames)
    written = []
    for side, label in enumerate(SIDES):
        fig, axes = plt.subplots(len(AXES), 1, figsize=(10, 7), sharex=True)
        runs = invisible_runs(mask[:, side])
        for axis, (ax, coordinate) in enumerate(zip(axes, AXES)):
            dim = windows.HAND_POSITION.start + axis
            mean = imputed.mean[:, side, dim]
            uncertainty = imputed.uncertainty[:, side, dim]
            for start, stop in runs:
                ax.axvspan(start - 0.5, stop - 0.5, color="0.85", linewidth=0)
            low, high = band_limits(mean, uncertainty, 2.0)
            ax.fill_between(time, low, high, color="tab:blue", alpha=0.15, linewidth=0, label="±2σ")
            low, high = band_limits(mean, uncertainty, 1.0)
            ax.fill_between(time, low, high, color="tab:blue", alpha=0.3, linewidth=0, label="±1σ")
            ax.plot(time, mean, color="tab:blue", linewidth=1.2, label="μ")
            ax.plot(time, ground_truth[:, side, dim], color="black", linewidth=1.0, linestyle="--", label="truth")
            ax.set_ylabel(f"{coordinate} (m)")
        axes[0].set_title(f"{label} hand, {imputed.kind} uncertainty")
        axes[0].legend(loc="upper right", fontsize="small", ncol=4)
        axes[-1].set_xlabel("frame")
        fig.tight_layout()
        for extension in FORMATS:
            filepath = directory / f"{name}_{label}.{extension}"
            fig.savefig(filepath, dpi=150)
            written.append(filepath)
        plt.close(fig)
    LOGGER.info("Wrote %d plots to %s", len(written), directory)
    return written
