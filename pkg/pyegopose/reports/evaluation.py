import json
import logging
import os
import pathlib
from typing import Dict, List, Tuple

import jinja2
import numpy as np
from scipy import stats

from pyegopose.features import kinematics, windows
from pyegopose.modules import enums, payloads
from pyegopose.modules.exceptions import raise_shape_error
from pyegopose.modules.models import EvaluationConfig
from pyegopose.modules.structures import DatasetSplit, MotionSequence

LOGGER = logging.getLogger("pyegopose")

templates = jinja2.Environment(
    loader=jinja2.FileSystemLoader(os.path.join(os.path.dirname(__file__), "templates")),
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)


def bootstrap_interval(
    values: List[float] | np.ndarray, resamples: int, confidence: float, rng: np.random.Generator
) -> payloads.Interval:
    """Mean and percentile bootstrap confidence interval over sequences.

    Args:
        values: Per-sequence values.
        resamples: Number of bootstrap resamples.
        confidence: Confidence level.
        rng: Random source of the resampling.

    Returns:
        Interval:
        Mean with lower and upper bounds; fewer than two values or constant values give a zero-width interval.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2 or np.ptp(values) == 0:
        return payloads.Interval(mean=mean, low=mean, high=mean)
    result = stats.bootstrap(
        (values,),
        np.mean,
        n_resamples=resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=rng,
    )
    return payloads.Interval(
        mean=mean, low=float(result.confidence_interval.low), high=float(result.confidence_interval.high)
    )


def metric_rows(
    label: str,
    seeds: List[int],
    predictions: List[MotionSequence],
    dataset: DatasetSplit,
    config: EvaluationConfig,
    rng: np.random.Generator,
) -> Tuple[payloads.ReportRow, List[payloads.SequenceRow]]:
    """Aggregated and per-sequence metrics of one set of predictions.

    Raises:
        ShapeError:
        If the predictions do not pair one-to-one with the split sequences.
    """
    if len(predictions) != len(dataset) or list(seeds) != list(dataset.seeds):
        raise_shape_error(f"{label} predictions", len(dataset), len(predictions))
    sequence_rows = [
        payloads.SequenceRow(label=label, seed=seed, metrics=kinematics.compute_metrics(prediction, truth))
        for seed, prediction, truth in zip(seeds, predictions, dataset.sequences)
    ]
    metrics = {}
    for name in payloads.MetricRecord.model_fields:
        values = [getattr(row.metrics, name) for row in sequence_rows]
        if any(value is None for value in values):
            continue
        metrics[name] = bootstrap_interval(values, config.bootstrap_resamples, config.confidence, rng)
    return payloads.ReportRow(label=label, sequences=len(sequence_rows), metrics=metrics), sequence_rows


def invisible_hand_errors(estimates: List[np.ndarray], dataset: DatasetSplit) -> Tuple[List[float], int]:
    """Per-sequence mean hand position error in cm over hand-frames without a detection.

    Returns:
        Tuple[List[float], int]:
        Errors of the sequences holding at least one such hand-frame, and the total hand-frame count.
    """
    errors, frames = [], 0
    for estimate, signal, detections in zip(estimates, dataset.signals, dataset.detections):
        if estimate.shape[:2] != signal.hands.shape[:2]:
            raise_shape_error("imputed hands", signal.hands.shape[:2], estimate.shape[:2])
        _, available = detections.dense()
        hidden = ~available
        if not hidden.any():
            continue
        distance = np.linalg.norm(
            estimate[..., windows.HAND_POSITION] - signal.hands[..., windows.HAND_POSITION], axis=-1
        )
        errors.append(float(distance[hidden].mean() * kinematics.METERS_TO_CM))
        frames += int(hidden.sum())
    return errors, frames


def calibration_row(
    kind: enums.UncertaintyKind, means: List[np.ndarray], uncertainties: List[np.ndarray], dataset: DatasetSplit
) -> payloads.CalibrationRow:
    """Fraction of ground-truth hand position coordinates within one and two standard deviations.

    Only hand-frames without a detection are counted.
    """
    inside_one, inside_two, count = 0, 0, 0
    for mean, uncertainty, signal, detections in zip(means, uncertainties, dataset.signals, dataset.detections):
        _, available = detections.dense()
        hidden = ~available
        deviation = np.abs(mean - signal.hands)[..., windows.HAND_POSITION][hidden]
        sigma = np.sqrt(uncertainty[..., windows.HAND_POSITION][hidden])
        inside_one += int(np.sum(deviation <= sigma))
        inside_two += int(np.sum(deviation <= 2 * sigma))
        count += deviation.size
    return payloads.CalibrationRow(
        kind=kind,
        coordinates=count,
        within_one_sigma=inside_one / count if count else 0.0,
        within_two_sigma=inside_two / count if count else 0.0,
    )


def visibility_stats(masks: List[np.ndarray]) -> payloads.VisibilityStats:
    """Histogram of the number of visible hands per frame and the visible hand-frame ratio."""
    if not masks:
        return payloads.VisibilityStats(frames=0, histogram={0: 0.0, 1: 0.0, 2: 0.0}, ratio=0.0)
    stacked = np.concatenate([np.asarray(mask, dtype=bool) for mask in masks])
    visible = stacked.sum(axis=1)
    counts = np.bincount(visible, minlength=3)
    return payloads.VisibilityStats(
        frames=int(stacked.shape[0]),
        histogram={hands: float(counts[hands] / stacked.shape[0]) for hands in range(3)},
        ratio=float(stacked.mean()),
    )


def evaluate_report(
    predictions: Dict[str, List[MotionSequence]],
    dataset: DatasetSplit,
    config: EvaluationConfig,
    header: Dict[str, object],
    seed: int = 0,
    imputation: Dict[str, List[np.ndarray]] | None = None,
    uncertainties: Dict[enums.UncertaintyKind, List[np.ndarray]] | None = None,
    timing: List[payloads.TimingRow] | None = None,
) -> payloads.EvaluationReport:
    """Builds the evaluation report of a split.

    Args:
        predictions: Generated sequences per row label, ordered like the split.
        dataset: Ground-truth split.
        config: Bootstrap settings.
        header: ``config_hash``, ``stride``, ``strategy``, ``uncertainty`` and ``n_samples`` of the run.
        seed: Seed of the bootstrap resampling.
        imputation: Dense hand estimates per imputation method, ordered like the split.
        uncertainties: Uncertainty of the ``ensemble`` imputation per kind, for the calibration rows.
        timing: Sampling wall time rows.

    Returns:
        EvaluationReport:
        Report whose aggregated rows are recomputable from its per-sequence rows.

    Raises:
        ShapeError:
        If any input does not align with the split.
    """
    report = payloads.EvaluationReport(
        split=dataset.split,
        visibility=visibility_stats(dataset.masks),
        timing=timing or [],
        **header,
    )
    for label in sorted(predictions):
        row, sequence_rows = metric_rows(
            label,
            dataset.seeds,
            predictions[label],
            dataset,
            config,
            np.random.default_rng([seed, len(report.rows)]),
        )
        report.rows.append(row)
        report.sequences.extend(sequence_rows)
    for label in sorted(imputation or {}):
        if len(imputation[label]) != len(dataset):
            raise_shape_error(f"{label} imputation", len(dataset), len(imputation[label]))
        errors, frames = invisible_hand_errors(imputation[label], dataset)
        if not errors:
            LOGGER.warning("No hand-frame lacks a detection, skipping the %s imputation row", label)
            continue
        rng = np.random.default_rng([seed, 1000 + len(report.imputation)])
        report.imputation.append(
            payloads.ImputationRow(
                label=label,
                frames=frames,
                error=bootstrap_interval(errors, config.bootstrap_resamples, config.confidence, rng),
            )
        )
    if uncertainties and imputation and "ensemble" in imputation:
        for kind in enums.UncertaintyKind:
            if kind in uncertainties:
                report.calibration.append(calibration_row(kind, imputation["ensemble"], uncertainties[kind], dataset))
    return report


def render_text(report: payloads.EvaluationReport) -> str:
    """Plain-text tables of a report."""
    return templates.get_template(enums.Templates.report).render(report=report)


def write_report(directory: pathlib.Path, report: payloads.EvaluationReport) -> Tuple[pathlib.Path, pathlib.Path]:
    """Writes the JSON report and its plain-text rendering.

    Returns:
        Tuple[pathlib.Path, pathlib.Path]:
        Paths of the JSON and text files.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / enums.Artifacts.report_json
    text_path = directory / enums.Artifacts.report_text
    with open(json_path, "w") as file:
        json.dump(report.model_dump(mode="json"), file, indent=2, sort_keys=True)
        file.write("\n")
    with open(text_path, "w") as file:
        file.write(render_text(report))
    LOGGER.info("Report written to %s", json_path)
    return json_path, text_path


def read_report(filepath: pathlib.Path) -> payloads.EvaluationReport:
    """Loads and validates a JSON report."""
    with open(filepath) as file:
        return payloads.EvaluationReport.model_validate(json.load(file))
