import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pyegopose.features import kinematics, windows
from pyegopose.modules.exceptions import ConfigError, ShapeError


@pytest.mark.parametrize(
    "frames, window, stride, expected",
    [
        (40, 40, 20, [0]),
        (100, 40, 20, [0, 20, 40, 60]),
        (105, 40, 20, [0, 20, 40, 60, 65]),
        (12, 8, 1, [0, 1, 2, 3, 4]),
    ],
)
def test_window_starts(frames, window, stride, expected):
    assert windows.window_starts(frames, window, stride) == expected


def test_window_starts_rejects_short_sequences():
    with pytest.raises(ShapeError):
        windows.window_starts(10, 40, 20)


def test_window_starts_rejects_gaps():
    with pytest.raises(ConfigError):
        windows.window_starts(100, 10, 20)


@pytest.mark.parametrize("frames, stride", [(105, 7), (30, 1), (40, 10)])
def test_stitch_recovers_the_signal(frames, stride):
    signal = np.random.default_rng(0).normal(size=(frames, 3))
    starts = windows.window_starts(frames, 10, stride)
    pieces = np.stack([signal[start : start + 10] for start in starts])
    np.testing.assert_allclose(windows.stitch(pieces, starts, frames, stride), signal, atol=1e-12)


def test_stitch_averages_overlaps_at_unit_stride():
    starts = [0, 1]
    values = np.array([[[0.0], [2.0]], [[4.0], [6.0]]])
    np.testing.assert_allclose(windows.stitch(values, starts, 3, 1)[:, 0], [0.0, 3.0, 6.0])


def test_stitch_rotations_stay_orthonormal():
    matrices = Rotation.random(12, random_state=0).as_matrix()[:, None]
    r6 = kinematics.matrix_to_rot6d(matrices)
    starts = windows.window_starts(12, 4, 1)
    pieces = np.stack([r6[start : start + 4] + 0.01 * start for start in starts])
    merged = kinematics.rot6d_to_matrix(windows.stitch_rotations(pieces, starts, 12, 1))
    np.testing.assert_allclose(np.linalg.det(merged), 1.0, atol=1e-10)


def test_canonicalization_moves_only_positions():
    head = np.random.default_rng(1).normal(size=(5, 18))
    hands = np.random.default_rng(2).normal(size=(5, 2, 9))
    offset = windows.canonical_offset(head)
    assert offset[1] == 0.0
    canonical = windows.canonicalize_head(head, offset)
    np.testing.assert_allclose(canonical[0, 12:15] * windows.GROUND_PLANE, 0.0, atol=1e-12)
    np.testing.assert_array_equal(canonical[:, :12], head[:, :12])
    moved = windows.canonicalize_hands(hands, offset)
    np.testing.assert_allclose(moved[..., :3], hands[..., :3] - offset)
    np.testing.assert_array_equal(moved[..., 3:], hands[..., 3:])


def test_motion_features_invert(motion):
    offset = np.array([0.5, 0.0, -1.0])
    features = windows.motion_features(motion.root, motion.rotations, offset)
    root, rotations = windows.split_motion_features(features, motion.skeleton.joint_count, offset)
    np.testing.assert_allclose(root, motion.root, atol=1e-12)
    np.testing.assert_array_equal(rotations, motion.rotations)
    with pytest.raises(ShapeError):
        windows.split_motion_features(features[..., :-1], motion.skeleton.joint_count, offset)
