import logging
from typing import Tuple

import numpy as np

from pyegopose.modules import enums, payloads
from pyegopose.modules.exceptions import (
    DegenerateRotation,
    DomainError,
    ShapeError,
    raise_shape_error,
)
from pyegopose.modules.structures import MotionSequence, Pose, Skeleton

LOGGER = logging.getLogger("pyegopose")
NORM_FLOOR = 1e-8
METERS_TO_CM = 100.0


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Converts 6D rotations into rotation matrices with Gram-Schmidt.

    Args:
        r6: Array of shape (..., 6) holding the first two columns of each rotation.

    See Also:
        - The first column is the normalized first 3-vector.
        - The second column is the second 3-vector orthogonalized against the first.
        - The third column is their cross product.

    Returns:
        np.ndarray:
        Rotation matrices of shape (..., 3, 3).

    Raises:
        DegenerateRotation:
        When a 3-vector is near zero, non-finite, or the two vectors are parallel.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise_shape_error("r6", "(..., 6)", r6.shape)
    if not np.all(np.isfinite(r6)):
        raise DegenerateRotation("6D rotation contains non-finite values")
    first, second = r6[..., :3], r6[..., 3:]
    first_norm = np.linalg.norm(first, axis=-1, keepdims=True)
    second_norm = np.linalg.norm(second, axis=-1, keepdims=True)
    if np.any(first_norm <= NORM_FLOOR) or np.any(second_norm <= NORM_FLOOR):
        raise DegenerateRotation("6D rotation has a zero-norm column")
    x = first / first_norm
    y = second - np.sum(x * second, axis=-1, keepdims=True) * x
    y_norm = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(y_norm <= NORM_FLOOR * second_norm):
        raise DegenerateRotation("6D rotation columns are parallel")
    y = y / y_norm
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(matrix: np.ndarray) -> np.ndarray:
    """First two columns of rotation matrices (..., 3, 3) flattened to (..., 6)."""
    matrix = np.asarray(matrix)
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Projects matrices (..., 3, 3) onto the closest proper rotation in the Frobenius norm."""
    left, _, right = np.linalg.svd(matrix)
    sign = np.sign(np.linalg.det(left @ right))
    sign = np.where(sign == 0, 1.0, sign)
    correction = np.ones(matrix.shape[:-1])
    correction[..., -1] = sign
    return (left * correction[..., None, :]) @ right


def geodesic_angle(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Angle in degrees between rotation matrices of shape (..., 3, 3).

    The arccos argument is clamped to [-1, 1].
    """
    trace = np.sum(first * second, axis=(-2, -1))
    return np.degrees(np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0)))


def sequence_kinematics(
    skeleton: Skeleton, root: np.ndarray, rotations: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Forward kinematics over a batch of frames.

    Args:
        skeleton: Skeleton in topological order.
        root: Root positions of shape (T, 3).
        rotations: Local 6D rotations of shape (T, J, 6).

    Returns:
        Tuple[np.ndarray, np.ndarray]:
        World positions (T, J, 3) and world rotation matrices (T, J, 3, 3).
    """
    if rotations.ndim != 3 or rotations.shape[1] != skeleton.joint_count:
        raise_shape_error("rotations", f"(T, {skeleton.joint_count}, 6)", rotations.shape)
    if root.shape != (rotations.shape[0], 3):
        raise_shape_error("root", (rotations.shape[0], 3), root.shape)
    local = rot6d_to_matrix(rotations)
    world = np.empty_like(local)
    relative = np.zeros(local.shape[:2] + (3,))
    world[:, 0] = local[:, 0]
    for joint in range(1, skeleton.joint_count):
        parent = skeleton.parents[joint]
        world[:, joint] = world[:, parent] @ local[:, joint]
        relative[:, joint] = relative[:, parent] + world[:, parent] @ skeleton.offsets[joint]
    return relative + np.asarray(root, dtype=np.float64)[:, None, :], world


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """World positions of every joint for a single pose.

    Args:
        skeleton: Skeleton in topological order.
        pose: Root position and local 6D rotations.

    Returns:
        np.ndarray:
        Joint positions of shape (J, 3) in meters.

    Raises:
        ShapeError:
        If the pose joint count does not match the skeleton.
    """
    if pose.rotations.shape[0] != skeleton.joint_count:
        raise_shape_error("pose", skeleton.joint_count, pose.rotations.shape[0])
    positions, _ = sequence_kinematics(skeleton, pose.root[None], pose.rotations[None])
    return positions[0]


def joint_positions(sequence: MotionSequence) -> np.ndarray:
    """Explicit positions when present, forward kinematics otherwise."""
    if sequence.positions is not None:
        return np.asarray(sequence.positions, dtype=np.float64)
    return sequence_kinematics(sequence.skeleton, sequence.root, sequence.rotations)[0]


def compute_metrics(pred: MotionSequence, gt: MotionSequence) -> payloads.MetricRecord:
    """Position, velocity and rotation errors between two aligned sequences.

    Args:
        pred: Predicted sequence.
        gt: Ground-truth sequence.

    See Also:
        - Positions are in cm, velocities in cm/s and rotations in degrees.
        - Rotation error is the geodesic angle between local joint rotations.
        - Region errors restrict the position error to joints labelled hand, upper or lower.

    Returns:
        MetricRecord:
        Metric record of the pair.

    Raises:
        ShapeError:
        On length, skeleton or frame rate mismatch.
        DomainError:
        When fewer than two frames leave the velocity error undefined.
    """
    if len(pred) != len(gt):
        raise ShapeError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    if not pred.skeleton.matches(gt.skeleton):
        raise ShapeError("sequences use different skeletons")
    if pred.fps != gt.fps:
        raise ShapeError(f"frame rates differ: {pred.fps} vs {gt.fps}")
    if len(gt) < 2:
        raise DomainError("velocity error needs at least two frames")
    pred_pos, gt_pos = joint_positions(pred), joint_positions(gt)
    distance = np.linalg.norm(pred_pos - gt_pos, axis=-1)
    velocity = (np.diff(pred_pos, axis=0) - np.diff(gt_pos, axis=0)) * gt.fps
    angles = geodesic_angle(rot6d_to_matrix(pred.rotations), rot6d_to_matrix(gt.rotations))
    regions = {}
    for region in enums.Region:
        indices = gt.skeleton.region_indices(region)
        regions[region] = (
            float(distance[:, indices].mean() * METERS_TO_CM) if indices else None
        )
    return payloads.MetricRecord(
        mpjpe=float(distance.mean() * METERS_TO_CM),
        mpjve=float(np.linalg.norm(velocity, axis=-1).mean() * METERS_TO_CM),
        mpjre=float(angles.mean()),
        hand_pe=regions[enums.Region.hand],
        upper_pe=regions[enums.Region.upper],
        lower_pe=regions[enums.Region.lower],
    )
