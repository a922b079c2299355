import numpy as np

from pyegopose.modules.structures import MotionSequence, SparseHands


def test_sequence_rebuilds_from_its_poses(motion):
    window = motion.window(2, 5)
    rebuilt = MotionSequence.from_poses(window.skeleton, window.poses, fps=window.fps)
    assert len(rebuilt) == 5
    np.testing.assert_array_equal(rebuilt.root, window.root)
    np.testing.assert_array_equal(rebuilt.rotations, window.rotations)


def test_sparse_hands_gather_only_visible_entries(rng):
    values = rng.normal(size=(4, 2, 3))
    mask = np.array([[True, False], [False, False], [True, True], [False, True]])
    sparse = SparseHands.from_dense(values, mask)
    assert len(sparse) == 4
    np.testing.assert_array_equal(sparse.frames, [0, 2, 2, 3])
    np.testing.assert_array_equal(sparse.sides, [0, 0, 1, 1])
    dense, available = sparse.dense()
    np.testing.assert_array_equal(available, mask)
    np.testing.assert_array_equal(dense[mask], values[mask])
    assert np.all(dense[~mask] == 0)
