import numpy as np
import pytest

from pyegopose.modules import enums
from pyegopose.modules.exceptions import ShapeError
from pyegopose.modules.structures import ImputedTrajectory
from pyegopose.reports import plots


@pytest.mark.parametrize(
    "visible, expected",
    [
        ([True, True, True], []),
        ([False, False], [(0, 2)]),
        ([True, False, False, True, False], [(1, 3), (4, 5)]),
    ],
)
def test_invisible_runs(visible, expected):
    assert plots.invisible_runs(np.array(visible)) == expected


def test_zero_uncertainty_bands_collapse():
    mean = np.linspace(0.0, 1.0, 5)
    low, high = plots.band_limits(mean, np.zeros(5), 2.0)
    np.testing.assert_array_equal(low, mean)
    np.testing.assert_array_equal(high, mean)
    low, high = plots.band_limits(mean, np.full(5, 0.04), 1.0)
    np.testing.assert_allclose(high - low, 0.4)


def test_emit_plots_writes_both_formats(tmp_path, rng):
    mask = rng.random((12, 2)) > 0.5
    imputed = ImputedTrajectory(
        mean=rng.normal(size=(12, 2, 9)),
        uncertainty=rng.uniform(0.0, 0.01, size=(12, 2, 9)),
        kind=enums.UncertaintyKind.epistemic,
        visibility=mask,
    )
    written = plots.emit_plots(imputed, rng.normal(size=(12, 2, 9)), mask, tmp_path / "plots", name="seq")
    assert sorted(path.name for path in written) == [
        "seq_left.png",
        "seq_left.svg",
        "seq_right.png",
        "seq_right.svg",
    ]
    assert all(path.stat().st_size > 0 for path in written)
    with pytest.raises(ShapeError):
        plots.emit_plots(imputed, np.zeros((11, 2, 9)), mask, tmp_path)
