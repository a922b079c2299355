import numpy as np
import pytest

from pyegopose.modules import enums, models, payloads
from pyegopose.modules.exceptions import ShapeError
from pyegopose.modules.structures import MotionSequence
from pyegopose.reports import evaluation

HEADER = {
    "config_hash": "0" * 64,
    "stride": 4,
    "strategy": enums.Strategy.sample,
    "uncertainty": enums.UncertaintyKind.aleatoric,
    "n_samples": 1,
}


@pytest.fixture
def config() -> models.EvaluationConfig:
    return models.EvaluationConfig(stride=4, bootstrap_resamples=200)


def test_bootstrap_interval_brackets_the_mean(rng):
    values = rng.normal(5.0, 1.0, size=40)
    interval = evaluation.bootstrap_interval(values, 500, 0.95, np.random.default_rng(0))
    assert interval.mean == pytest.approx(values.mean())
    assert interval.low < interval.mean < interval.high


@pytest.mark.parametrize("values", [[2.5], [1.0, 1.0, 1.0]])
def test_bootstrap_interval_degenerate(values):
    interval = evaluation.bootstrap_interval(values, 100, 0.95, np.random.default_rng(0))
    assert interval.low == interval.mean == interval.high


def test_visibility_stats():
    hidden = evaluation.visibility_stats([np.zeros((10, 2), dtype=bool)])
    assert hidden.histogram == {0: 1.0, 1: 0.0, 2: 0.0}
    assert hidden.ratio == 0.0
    mixed = evaluation.visibility_stats([np.array([[True, True], [True, False], [False, False], [False, False]])])
    assert mixed.histogram == {0: 0.5, 1: 0.25, 2: 0.25}
    assert mixed.ratio == pytest.approx(3 / 8)
    assert evaluation.visibility_stats([]).frames == 0


def test_invisible_hand_errors(test_split):
    truth = [signal.hands for signal in test_split.signals]
    errors, frames = evaluation.invisible_hand_errors(truth, test_split)
    assert all(error == pytest.approx(0.0) for error in errors)
    hidden = sum(int((~detections.dense()[1]).sum()) for detections in test_split.detections)
    assert frames == hidden
    shifted = [hands + np.array([0.0, 0.03, 0.0] + [0.0] * (hands.shape[-1] - 3)) for hands in truth]
    errors, _ = evaluation.invisible_hand_errors(shifted, test_split)
    assert all(error == pytest.approx(3.0) for error in errors)
    with pytest.raises(ShapeError):
        evaluation.invisible_hand_errors([hands[:-1] for hands in truth], test_split)


def test_calibration_of_exact_estimates(test_split):
    truth = [signal.hands for signal in test_split.signals]
    spread = [np.full_like(hands, 0.01) for hands in truth]
    row = evaluation.calibration_row(enums.UncertaintyKind.total, truth, spread, test_split)
    expected = 1.0 if row.coordinates else 0.0
    assert row.within_one_sigma == expected
    assert row.within_two_sigma == expected


def test_report_of_ground_truth(test_split, config):
    truth = [signal.hands for signal in test_split.signals]
    report = evaluation.evaluate_report(
        {"oracle": test_split.sequences},
        test_split,
        config,
        HEADER,
        imputation={"ensemble": truth},
        uncertainties={enums.UncertaintyKind.aleatoric: [np.full_like(hands, 0.01) for hands in truth]},
    )
    row = report.rows[0]
    assert row.label == "oracle"
    assert row.sequences == len(test_split)
    assert row.metrics["mpjpe"].mean == pytest.approx(0.0, abs=1e-9)
    assert len(report.sequences) == len(test_split)
    assert [item.seed for item in report.sequences] == test_split.seeds
    assert [item.kind for item in report.calibration] == [enums.UncertaintyKind.aleatoric]


def test_report_rows_recompute_from_sequences(test_split, config):
    shifted = [
        MotionSequence(
            skeleton=sequence.skeleton,
            fps=sequence.fps,
            root=sequence.root + [0.0, 0.01 * index, 0.0],
            rotations=sequence.rotations,
        )
        for index, sequence in enumerate(test_split.sequences, start=1)
    ]
    report = evaluation.evaluate_report({"shifted": shifted}, test_split, config, HEADER)
    per_sequence = [item.metrics.mpjpe for item in report.sequences]
    assert report.rows[0].metrics["mpjpe"].mean == pytest.approx(np.mean(per_sequence))


def test_report_rejects_misaligned_predictions(test_split, config):
    with pytest.raises(ShapeError):
        evaluation.evaluate_report({"short": test_split.sequences[:1]}, test_split, config, HEADER)


def test_report_files(tmp_path, test_split, config):
    report = evaluation.evaluate_report({"oracle": test_split.sequences}, test_split, config, HEADER)
    report.timing.append(payloads.TimingRow(label="sample", steps=4, seconds_per_window=0.01))
    json_path, text_path = evaluation.write_report(tmp_path, report)
    assert evaluation.read_report(json_path) == report
    text = text_path.read_text()
    assert "oracle" in text
    assert "Sampling time" in text
    assert "Calibration" not in text
