from typing import List, Tuple

import numpy as np

from pyegopose.features import kinematics
from pyegopose.modules.exceptions import ConfigError, raise_shape_error
from pyegopose.modules.structures import DatasetSplit

HEAD_POSITION = slice(12, 15)
HAND_POSITION = slice(0, 3)
GROUND_PLANE = np.array([1.0, 0.0, 1.0])


def window_starts(frames: int, window: int, stride: int) -> List[int]:
    """First frame of every window covering a sequence.

    Args:
        frames: Sequence length.
        window: Window length.
        stride: Distance between consecutive window starts.

    Returns:
        List[int]:
        Start frames; a final window aligned to the sequence end is appended when the stride leaves a tail.

    Raises:
        ShapeError:
        If the sequence is shorter than one window.
        ConfigError:
        If the stride would leave frames between windows uncovered.
    """
    if not 0 < stride <= window:
        raise ConfigError(f"stride must lie in [1, {window}], received {stride}")
    if frames < window:
        raise_shape_error("frames", f">= {window}", frames)
    starts = list(range(0, frames - window + 1, stride))
    if starts[-1] + window < frames:
        starts.append(frames - window)
    return starts


def canonical_offset(head: np.ndarray) -> np.ndarray:
    """Ground-plane head position at the first frame of each window, shape (..., 3)."""
    return head[..., 0, HEAD_POSITION] * GROUND_PLANE


def canonicalize_head(head: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Head features expressed relative to a window offset."""
    head = head.copy()
    head[..., HEAD_POSITION] -= offset[..., None, :]
    return head


def canonicalize_hands(hands: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Hand states (..., T, 2, D) expressed relative to a window offset."""
    hands = hands.copy()
    hands[..., HAND_POSITION] -= offset[..., None, None, :]
    return hands


def stitch(values: np.ndarray, starts: List[int], frames: int, stride: int) -> np.ndarray:
    """Merges per-window values back onto the sequence frame grid.

    Args:
        values: Per-window values of shape (N, W, ...).
        starts: Start frame of each window, ascending.
        frames: Sequence length.
        stride: Window stride; 1 averages every covering window, larger strides tile.

    Returns:
        np.ndarray:
        Values of shape (frames, ...).
    """
    window = values.shape[1]
    merged = np.zeros((frames,) + values.shape[2:], dtype=np.float64)
    if stride == 1:
        counts = np.zeros(frames)
        for start, value in zip(starts, values):
            merged[start : start + window] += value
            counts[start : start + window] += 1
        return merged / counts.reshape((frames,) + (1,) * (values.ndim - 2))
    covered = 0
    for start, value in zip(starts, values):
        stop = start + window
        if stop > covered:
            merged[covered:stop] = value[covered - start :]
            covered = stop
    return merged


def stitch_rotations(rotations: np.ndarray, starts: List[int], frames: int, stride: int) -> np.ndarray:
    """Merges per-window 6D rotations (N, W, J, 6); overlapping windows are averaged as rotation matrices."""
    if stride != 1:
        return stitch(rotations, starts, frames, stride)
    mean = stitch(kinematics.rot6d_to_matrix(rotations), starts, frames, stride)
    return kinematics.matrix_to_rot6d(kinematics.nearest_rotation(mean))


def motion_features(root: np.ndarray, rotations: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Per-frame tokenizer features: canonical root position then flattened local 6D rotations.

    Args:
        root: Root positions (..., T, 3).
        rotations: Local rotations (..., T, J, 6).
        offset: Window offsets (..., 3).

    Returns:
        np.ndarray:
        Features of shape (..., T, 3 + 6 J).
    """
    flat = rotations.reshape(rotations.shape[:-2] + (-1,))
    return np.concatenate([root - offset[..., None, :], flat], axis=-1)


def split_motion_features(
    features: np.ndarray, joint_count: int, offset: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of ``motion_features``: world root positions and local 6D rotations."""
    if features.shape[-1] != 3 + 6 * joint_count:
        raise_shape_error("features", 3 + 6 * joint_count, features.shape[-1])
    root = features[..., :3] + offset[..., None, :]
    rotations = features[..., 3:].reshape(features.shape[:-1] + (joint_count, 6))
    return root, rotations


def split_windows(dataset: DatasetSplit, window: int, stride: int) -> List[Tuple[int, int]]:
    """(sequence index, start frame) of every training window of a split."""
    return [
        (index, start)
        for index, sequence in enumerate(dataset.sequences)
        for start in window_starts(len(sequence), window, stride)
    ]
