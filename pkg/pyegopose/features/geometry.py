import logging
from typing import List

import numpy as np

from pyegopose.features import kinematics
from pyegopose.modules import enums
from pyegopose.modules.exceptions import (
    BehindCamera,
    DomainError,
    NonConvergence,
    NumericFailure,
    RankError,
    raise_shape_error,
)
from pyegopose.modules.models import HAND_JOINTS, PinholeCamera
from pyegopose.modules.structures import (
    HEAD_JOINT,
    WRIST_JOINTS,
    HandObservation,
    MotionSequence,
    OffsetSolution,
    SparseHands,
)

LOGGER = logging.getLogger("pyegopose")
MIN_DEPTH = 1e-6
RANK_TOLERANCE = 1e-9


def project_pinhole(cam: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """Perspective projection of camera-frame points.

    Args:
        cam: Pinhole camera.
        points: Points of shape (N, 3) in meters.

    Returns:
        np.ndarray:
        Pixel coordinates of shape (N, 2).

    Raises:
        BehindCamera:
        If any point has depth at or below 1e-6 m.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise_shape_error("points", "(N, 3)", points.shape)
    depth = points[:, 2]
    if np.any(depth <= MIN_DEPTH):
        raise BehindCamera(f"{int(np.sum(depth <= MIN_DEPTH))} point(s) at non-positive depth")
    return np.stack(
        [cam.fx * points[:, 0] / depth + cam.cx, cam.fy * points[:, 1] / depth + cam.cy],
        axis=-1,
    )


def _projection_jacobian(cam: PinholeCamera, points: np.ndarray) -> np.ndarray:
    """Jacobian of the stacked projections w.r.t. a shared translation, shape (2N, 3)."""
    x, y, z = points.T
    jacobian = np.zeros((points.shape[0], 2, 3))
    jacobian[:, 0, 0] = cam.fx / z
    jacobian[:, 0, 2] = -cam.fx * x / z**2
    jacobian[:, 1, 1] = cam.fy / z
    jacobian[:, 1, 2] = -cam.fy * y / z**2
    return jacobian.reshape(-1, 3)


def solve_wrist_offset(
    cam: PinholeCamera,
    local3d: np.ndarray,
    obs2d: np.ndarray,
    init_depth: float = 1.0,
    max_iterations: int = 50,
    tolerance: float = 1e-10,
    patience: int = 5,
) -> OffsetSolution:
    """Recovers the translation placing root-relative hand joints onto their 2D detections.

    Args:
        cam: Pinhole camera.
        local3d: Root-relative 3D joints of shape (N, 3), N >= 3.
        obs2d: Detected pixel coordinates of shape (N, 2).
        init_depth: Initial depth of the offset in meters.
        max_iterations: Iteration cap, counting rejected steps.
        tolerance: Undamped Gauss-Newton step norm below which the solve has converged.
        patience: Consecutive cost increases tolerated before giving up.

    See Also:
        - Gauss-Newton on the three offset parameters, starting at (0, 0, ``init_depth``).
        - A step raising the cost is rejected and retried at half length.
        - Accepted residuals never increase.

    Returns:
        OffsetSolution:
        Offset, final RMS residual in pixels, iteration count and accepted RMS history.

    Raises:
        RankError:
        If the joints are collinear or the Jacobian loses rank.
        NonConvergence:
        If the cost increases ``patience`` times in a row, carrying the best iterate.
        BehindCamera:
        If the initial guess places a joint behind the camera.
    """
    local3d = np.asarray(local3d, dtype=np.float64)
    obs2d = np.asarray(obs2d, dtype=np.float64)
    if local3d.ndim != 2 or local3d.shape[1] != 3 or local3d.shape[0] < 3:
        raise_shape_error("local3d", "(N >= 3, 3)", local3d.shape)
    if obs2d.shape != (local3d.shape[0], 2):
        raise_shape_error("obs2d", (local3d.shape[0], 2), obs2d.shape)
    if init_depth <= 0:
        raise DomainError(f"init_depth must be positive, received {init_depth}")
    singular = np.linalg.svd(local3d - local3d.mean(axis=0), compute_uv=False)
    if singular[0] <= RANK_TOLERANCE or singular[1] <= RANK_TOLERANCE * singular[0]:
        raise RankError("joints are collinear and cannot constrain the offset")

    def cost_at(offset: np.ndarray) -> float:
        residual = obs2d - project_pinhole(cam, local3d + offset)
        return float(np.sum(residual**2))

    offset = np.array([0.0, 0.0, init_depth])
    cost = cost_at(offset)
    history = [np.sqrt(cost / len(local3d))]
    scale, increases, iteration = 1.0, 0, 0
    while iteration < max_iterations:
        iteration += 1
        points = local3d + offset
        jacobian = _projection_jacobian(cam, points)
        if np.linalg.matrix_rank(jacobian) < 3:
            raise RankError("projection Jacobian is rank deficient")
        residual = (obs2d - project_pinhole(cam, points)).reshape(-1)
        step = np.linalg.lstsq(jacobian, residual, rcond=None)[0]
        if np.linalg.norm(step) < tolerance:
            break
        trial = offset + step * scale
        try:
            trial_cost = cost_at(trial)
        except BehindCamera:
            trial_cost = np.inf
        if trial_cost <= cost:
            offset, cost = trial, trial_cost
            history.append(np.sqrt(cost / len(local3d)))
            scale, increases = 1.0, 0
            if cost == 0.0:
                break
        else:
            increases += 1
            scale *= 0.5
            if increases >= patience:
                raise NonConvergence(
                    f"cost increased {increases} consecutive iterations",
                    best_offset=offset,
                    best_rms=history[-1],
                )
    else:
        LOGGER.debug("Offset solve stopped at %d iterations, rms %.3e px", iteration, history[-1])
    return OffsetSolution(offset=offset, rms=history[-1], iterations=iteration, history=history)


def hand_template() -> np.ndarray:
    """Canonical open hand with 21 joints in the wrist frame, meters.

    Returns:
        np.ndarray:
        Joint positions of shape (21, 3); the first row is the wrist at the origin.
    """
    joints = [np.zeros(3)]
    thumb = np.array(
        [[0.030, -0.020, 0.020], [0.045, -0.040, 0.030], [0.055, -0.060, 0.035], [0.060, -0.075, 0.040]]
    )
    joints.extend(thumb)
    segments = np.array([0.035, 0.025, 0.020])
    for lateral in (0.025, 0.008, -0.010, -0.027):
        position = np.array([lateral, -0.090, 0.0])
        joints.append(position.copy())
        for depth, length in enumerate(segments, start=1):
            position = position + np.array([0.0, -length, 0.005 * depth])
            joints.append(position.copy())
    template = np.stack(joints)
    assert template.shape == (HAND_JOINTS, 3)
    return template


def camera_frame(view_axis: enums.ViewAxis) -> np.ndarray:
    """Rotation from the head frame to the camera frame for a forward axis."""
    if view_axis == enums.ViewAxis.negative_z:
        return np.diag([-1.0, 1.0, -1.0])
    return np.eye(3)


def observe_hand(
    cam: PinholeCamera,
    head_position: np.ndarray,
    head_rotation: np.ndarray,
    wrist_position: np.ndarray,
    wrist_rotation: np.ndarray,
    rng: np.random.Generator,
    pixel_noise: float,
    init_depth: float = 1.0,
    view_axis: enums.ViewAxis = enums.ViewAxis.positive_z,
    frame: int = 0,
    side: int = 0,
) -> HandObservation:
    """Emulates a 2D/3D hand detector and lifts the wrist back to the world frame.

    Args:
        cam: Head-mounted pinhole camera.
        head_position: Head position in the world frame.
        head_rotation: Head world rotation matrix.
        wrist_position: Ground-truth wrist position.
        wrist_rotation: Ground-truth wrist world rotation matrix.
        rng: Random generator for the pixel noise.
        pixel_noise: Standard deviation of the pixel noise.
        init_depth: Initial depth of the solver.
        view_axis: Head axis used as camera forward direction.
        frame: Frame index of the observation.
        side: Hand side index, 0 for left and 1 for right.

    Returns:
        HandObservation:
        Observation whose ``recovered`` holds the camera-frame joints when ``valid``.
    """
    to_camera = camera_frame(view_axis) @ head_rotation.T
    local3d = (to_camera @ wrist_rotation @ hand_template().T).T
    offset = to_camera @ (wrist_position - head_position)
    observation = HandObservation(frame=frame, side=side, local3d=local3d, obs2d=np.zeros((HAND_JOINTS, 2)))
    try:
        observation.obs2d = project_pinhole(cam, local3d + offset) + rng.normal(
            0.0, pixel_noise, size=(HAND_JOINTS, 2)
        )
        solution = solve_wrist_offset(cam, local3d, observation.obs2d, init_depth)
    except NumericFailure as error:
        LOGGER.debug("Frame %d side %d dropped: %s", frame, side, error)
        return observation
    observation.recovered = local3d + solution.offset
    observation.valid = True
    return observation


def simulate_detections(
    seq: MotionSequence,
    mask: np.ndarray,
    cam: PinholeCamera,
    noise_sigma_m: float,
    rng: np.random.Generator,
    hand_mode: int = 9,
    detector: enums.Detector = enums.Detector.gaussian,
    pixel_noise: float = 1.0,
    init_depth: float = 1.0,
    view_axis: enums.ViewAxis = enums.ViewAxis.positive_z,
) -> SparseHands:
    """Converts ground-truth hands and visibility into sparse detector output.

    Args:
        seq: Ground-truth motion.
        mask: Visibility mask of shape (T, 2).
        cam: Head-mounted pinhole camera.
        noise_sigma_m: Per-axis wrist noise of the gaussian detector in meters.
        rng: Random generator.
        hand_mode: 3 for position only, 9 to append the wrist 6D rotation.
        detector: ``gaussian`` perturbs the wrist, ``reprojection`` solves it from noisy pixels.
        pixel_noise: Pixel noise of the reprojection detector.
        init_depth: Initial depth of the reprojection solve.
        view_axis: Head axis used as camera forward direction.

    See Also:
        - Invisible frames emit nothing.
        - Wrist rotations pass through unperturbed.
        - Failed reprojection solves drop the observation.

    Returns:
        SparseHands:
        Frame-major detection table.
    """
    if noise_sigma_m < 0:
        raise DomainError(f"noise_sigma_m must be non-negative, received {noise_sigma_m}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(seq), 2):
        raise_shape_error("mask", (len(seq), 2), mask.shape)
    positions, world = kinematics.sequence_kinematics(seq.skeleton, seq.root, seq.rotations)
    head = seq.skeleton.index(HEAD_JOINT)
    wrists = [seq.skeleton.index(name) for name in WRIST_JOINTS]
    frames, sides = np.nonzero(mask)
    joints = np.asarray(wrists)[sides]
    wrist_positions = positions[frames, joints]
    wrist_rotations = world[frames, joints]
    if detector == enums.Detector.gaussian:
        detected = wrist_positions + rng.normal(0.0, noise_sigma_m, size=wrist_positions.shape)
        keep = np.ones(len(frames), dtype=bool)
    else:
        to_world = np.swapaxes(camera_frame(view_axis) @ np.swapaxes(world[:, head], -1, -2), -1, -2)
        detected = np.zeros_like(wrist_positions)
        keep = np.zeros(len(frames), dtype=bool)
        for row, (frame, side) in enumerate(zip(frames, sides)):
            observation = observe_hand(
                cam,
                positions[frame, head],
                world[frame, head],
                wrist_positions[row],
                wrist_rotations[row],
                rng,
                pixel_noise,
                init_depth,
                view_axis,
                int(frame),
                int(side),
            )
            if observation.valid:
                detected[row] = positions[frame, head] + to_world[frame] @ observation.recovered[0]
                keep[row] = True
        if dropped := int(np.sum(~keep)):
            LOGGER.info("Reprojection detector dropped %d of %d observations", dropped, len(keep))
    values: List[np.ndarray] = [detected]
    if hand_mode == 9:
        values.append(kinematics.matrix_to_rot6d(wrist_rotations))
    elif hand_mode != 3:
        raise DomainError(f"hand_mode must be 3 or 9, received {hand_mode}")
    return SparseHands(
        frame_count=len(seq),
        frames=frames[keep].astype(np.int32),
        sides=sides[keep].astype(np.int32),
        values=np.concatenate(values, axis=-1)[keep],
    )
