import logging
import pathlib
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from pyegopose.executors import container
from pyegopose.features import geometry, kinematics
from pyegopose.modules import enums, models
from pyegopose.modules.exceptions import ConfigError, DomainError
from pyegopose.modules.structures import (
    HEAD_JOINT,
    WRIST_JOINTS,
    DatasetSplit,
    MotionSequence,
    Skeleton,
    SparseHands,
    TrackingSignal,
)

LOGGER = logging.getLogger("pyegopose")

PELVIS_HEIGHT = 0.95
SPINE_LENGTH = 0.40
REST_ABDUCTION_DEG = 8.0
ELBOW_RAISE_RATIO = 0.625
DETECTION_STREAM = 7919
ANGLE_TOLERANCE_DEG = 1e-9


def build_skeleton(joint_count: int = 22) -> Skeleton:
    """Synthetic humanoid with ``joint_count - 19`` spine segments.

    Args:
        joint_count: Total number of joints, at least 20.

    See Also:
        The body is y-up, faces +z and its left side is +x.

    Returns:
        Skeleton:
        Humanoid skeleton with ``head``, ``left_wrist`` and ``right_wrist`` designated.
    """
    spine_segments = joint_count - 19
    if spine_segments < 1:
        raise ConfigError(f"synthetic body needs at least {models.MIN_JOINTS} joints, received {joint_count}")
    names, parents, offsets = ["pelvis"], [-1], [(0.0, 0.0, 0.0)]

    def add(name: str, parent: int, offset: Tuple[float, float, float]) -> int:
        names.append(name)
        parents.append(parent)
        offsets.append(offset)
        return len(names) - 1

    spine_top = 0
    for segment in range(spine_segments):
        spine_top = add(f"spine_{segment + 1}", spine_top, (0.0, SPINE_LENGTH / spine_segments, 0.0))
    neck = add("neck", spine_top, (0.0, 0.12, 0.0))
    add(HEAD_JOINT, neck, (0.0, 0.12, 0.0))
    for side, sign in (("left", 1.0), ("right", -1.0)):
        collar = add(f"{side}_collar", spine_top, (0.07 * sign, 0.08, 0.0))
        shoulder = add(f"{side}_shoulder", collar, (0.10 * sign, 0.0, 0.0))
        elbow = add(f"{side}_elbow", shoulder, (0.0, -0.28, 0.0))
        add(f"{side}_wrist", elbow, (0.0, -0.25, 0.0))
    for side, sign in (("left", 1.0), ("right", -1.0)):
        hip = add(f"{side}_hip", 0, (0.09 * sign, -0.06, 0.0))
        knee = add(f"{side}_knee", hip, (0.0, -0.42, 0.0))
        ankle = add(f"{side}_ankle", knee, (0.0, -0.42, 0.0))
        add(f"{side}_foot", ankle, (0.0, -0.05, 0.12))
    offsets = np.asarray(offsets)
    heights = np.zeros(len(names))
    for joint in range(1, len(names)):
        heights[joint] = heights[parents[joint]] + offsets[joint, 1]
    regions = []
    for joint, name in enumerate(names):
        if name in WRIST_JOINTS:
            regions.append(enums.Region.hand)
        elif heights[joint] > 0:
            regions.append(enums.Region.upper)
        else:
            regions.append(enums.Region.lower)
    return Skeleton(names=names, parents=parents, offsets=offsets, regions=regions)


def sinusoid_mix(
    rng: np.random.Generator, time: np.ndarray, amplitude: float, min_hz: float, max_hz: float
) -> np.ndarray:
    """Sum of one to three sinusoids whose absolute amplitudes add up to at most ``amplitude``."""
    count = int(rng.integers(1, 4))
    weights = rng.dirichlet(np.ones(count)) * amplitude * rng.uniform(0.5, 1.0)
    frequency = rng.uniform(min_hz, max_hz, size=count)
    phase = rng.uniform(0.0, 2 * np.pi, size=count)
    return np.sum(weights[:, None] * np.sin(2 * np.pi * frequency[:, None] * time + phase[:, None]), axis=0)


def raise_envelope(rng: np.random.Generator, time: np.ndarray, config: models.GeneratorConfig) -> np.ndarray:
    """Poisson-scheduled hand raise episodes with smooth ramps, scaled per episode."""
    envelope = np.zeros_like(time)
    if config.raise_rate_hz <= 0:
        return envelope
    duration = time[-1] + 1.0 / config.fps
    start = rng.exponential(1.0 / config.raise_rate_hz) - config.raise_duration_s[1]
    while start < duration:
        length = rng.uniform(*config.raise_duration_s)
        scale = rng.uniform(0.8, 1.15)
        ramp = min(config.raise_ramp_s, length / 2)
        rise = np.clip((time - start) / ramp, 0.0, 1.0)
        fall = np.clip((start + length - time) / ramp, 0.0, 1.0)
        shape = np.minimum(rise, fall)
        envelope = np.maximum(envelope, scale * shape * shape * (3 - 2 * shape))
        start += length + rng.exponential(1.0 / config.raise_rate_hz)
    return envelope


def generate_motion(config: models.GeneratorConfig, seed: int) -> MotionSequence:
    """Procedural full-body motion.

    Args:
        config: Generator settings.
        seed: Random seed; equal seeds give bit-identical sequences.

    See Also:
        - Each joint angle is a sum of at most three sinusoids within the configured amplitude limit.
        - ``walk`` adds a gait cycle to legs and arms and moves the root along a slowly turning heading.
        - Both arms receive Poisson-scheduled raise episodes that bring the wrist into view.

    Returns:
        MotionSequence:
        Generated motion in float64.

    Raises:
        ConfigError:
        For non-positive frame count, joint count or frame rate.
    """
    if config.frames <= 0 or config.fps <= 0 or config.joint_count <= 0:
        raise ConfigError("frames, joint_count and fps must be positive")
    skeleton = build_skeleton(config.joint_count)
    rng = np.random.default_rng(seed)
    time = np.arange(config.frames) / config.fps
    limits = config.amplitude
    euler = np.zeros((config.frames, skeleton.joint_count, 3))
    for joint, name in enumerate(skeleton.names):
        if name.startswith(("pelvis", "spine")):
            limit = limits.spine
        elif name in ("neck", HEAD_JOINT):
            limit = limits.head
        elif name.endswith(("collar", "shoulder", "elbow", "wrist")):
            limit = limits.arm
        else:
            limit = limits.leg
        for axis in range(3):
            euler[:, joint, axis] = sinusoid_mix(
                rng, time, np.radians(limit), config.min_frequency_hz, config.max_frequency_hz
            )
    heading = rng.uniform(0.0, 2 * np.pi) + sinusoid_mix(
        rng, time, np.radians(4 * limits.spine), config.min_frequency_hz, config.min_frequency_hz * 2
    )
    gait_phase = rng.uniform(0.0, 2 * np.pi)
    gait = 2 * np.pi * config.gait_frequency_hz * time + gait_phase
    index = skeleton.index
    root = np.tile([0.0, PELVIS_HEIGHT, 0.0], (config.frames, 1))
    for side, sign in (("left", 1.0), ("right", -1.0)):
        euler[:, index(f"{side}_shoulder"), 2] += sign * np.radians(REST_ABDUCTION_DEG)
        envelope = raise_envelope(rng, time, config)
        euler[:, index(f"{side}_shoulder"), 0] -= np.radians(limits.hand_raise) * envelope
        euler[:, index(f"{side}_elbow"), 0] -= np.radians(ELBOW_RAISE_RATIO * limits.hand_raise) * envelope
        if config.root_style == enums.RootStyle.walk:
            swing = sign * np.sin(gait)
            euler[:, index(f"{side}_hip"), 0] -= 0.6 * np.radians(limits.leg) * swing
            euler[:, index(f"{side}_knee"), 0] += 0.8 * np.radians(limits.leg) * np.maximum(0.0, swing)
            euler[:, index(f"{side}_shoulder"), 0] += 0.5 * np.radians(limits.arm) * swing
    if config.root_style == enums.RootStyle.walk:
        step = config.walk_speed / config.fps
        root[1:, 0] = np.cumsum(step * np.sin(heading[:-1]))
        root[1:, 2] = np.cumsum(step * np.cos(heading[:-1]))
        root[:, 1] += 0.01 * np.cos(2 * gait) * float(limits.leg > 0)
    local = Rotation.from_euler("xyz", euler.reshape(-1, 3)).as_matrix().reshape(euler.shape + (3,))
    local[:, 0] = Rotation.from_euler("y", heading).as_matrix() @ local[:, 0]
    return MotionSequence(
        skeleton=skeleton, fps=config.fps, root=root, rotations=kinematics.matrix_to_rot6d(local)
    )


def derive_tracking_signal(seq: MotionSequence, hand_mode: int = 9) -> TrackingSignal:
    """Head features and dense hand states of a sequence.

    Args:
        seq: Motion sequence; its skeleton must designate ``head``, ``left_wrist`` and ``right_wrist``.
        hand_mode: 3 for wrist position, 9 for wrist position and 6D world rotation.

    See Also:
        The 18 head dimensions are the 6D head orientation, its difference to the previous frame,
        the head position and its difference to the previous frame; frame 0 differences are zero.

    Returns:
        TrackingSignal:
        Head features (T, 18) and hand states (T, 2, hand_mode).

    Raises:
        ConfigError:
        If a designated joint is missing or ``hand_mode`` is not 3 or 9.
    """
    if hand_mode not in (3, 9):
        raise ConfigError(f"hand_mode must be 3 or 9, received {hand_mode}")
    head = seq.skeleton.index(HEAD_JOINT)
    wrists = [seq.skeleton.index(name) for name in WRIST_JOINTS]
    positions, world = kinematics.sequence_kinematics(seq.skeleton, seq.root, seq.rotations)
    head_6d = kinematics.matrix_to_rot6d(world[:, head])
    head_position = positions[:, head]
    orientation_delta = np.zeros_like(head_6d)
    orientation_delta[1:] = np.diff(head_6d, axis=0)
    position_delta = np.zeros_like(head_position)
    position_delta[1:] = np.diff(head_position, axis=0)
    hands = positions[:, wrists]
    if hand_mode == 9:
        hands = np.concatenate([hands, kinematics.matrix_to_rot6d(world[:, wrists])], axis=-1)
    return TrackingSignal(
        head=np.concatenate([head_6d, orientation_delta, head_position, position_delta], axis=-1),
        hands=hands,
        fps=seq.fps,
    )


def visibility_mask(
    head_position: np.ndarray,
    head_rotation: np.ndarray,
    wrists: np.ndarray,
    half_angle_deg: float = 45.0,
    view_axis: enums.ViewAxis = enums.ViewAxis.positive_z,
) -> np.ndarray:
    """Field-of-view test on raw frames.

    Args:
        head_position: Head positions (T, 3).
        head_rotation: Head world rotations (T, 3, 3).
        wrists: Wrist positions (T, 2, 3).
        half_angle_deg: Inclusive half angle of the view cone.
        view_axis: Head axis treated as the camera forward direction.

    Returns:
        np.ndarray:
        Boolean mask (T, 2); a wrist coincident with the head is invisible.
    """
    if not 0 < half_angle_deg < 180:
        raise DomainError(f"half_angle_deg must lie in (0, 180), received {half_angle_deg}")
    sign = -1.0 if view_axis == enums.ViewAxis.negative_z else 1.0
    forward = sign * head_rotation[..., :, 2]
    direction = wrists - head_position[:, None, :]
    distance = np.linalg.norm(direction, axis=-1)
    cosine = np.sum(forward[:, None, :] * direction, axis=-1) / np.where(distance > 0, distance, 1.0)
    angle = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return (distance > 0) & (angle <= half_angle_deg + ANGLE_TOLERANCE_DEG)


def compute_visibility(
    seq: MotionSequence,
    half_angle_deg: float = 45.0,
    view_axis: enums.ViewAxis = enums.ViewAxis.positive_z,
) -> np.ndarray:
    """Per-frame, per-hand visibility in the egocentric view.

    Args:
        seq: Motion sequence.
        half_angle_deg: Inclusive half angle of the view cone in degrees.
        view_axis: Head axis treated as the camera forward direction.

    Returns:
        np.ndarray:
        Boolean mask (T, 2), left hand first.
    """
    head = seq.skeleton.index(HEAD_JOINT)
    wrists = [seq.skeleton.index(name) for name in WRIST_JOINTS]
    positions, world = kinematics.sequence_kinematics(seq.skeleton, seq.root, seq.rotations)
    return visibility_mask(positions[:, head], world[:, head], positions[:, wrists], half_angle_deg, view_axis)


def _as_float32(seq: MotionSequence) -> MotionSequence:
    """Rounds a sequence to its storage precision."""
    return MotionSequence(
        skeleton=seq.skeleton,
        fps=seq.fps,
        root=seq.root.astype(np.float32),
        rotations=seq.rotations.astype(np.float32),
    )


def synthesize_sequence(
    config: models.DataConfig, seed: int
) -> Tuple[MotionSequence, TrackingSignal, np.ndarray, SparseHands]:
    """Generates one sequence with its tracking signal, visibility and detections.

    Every output is derived from the float32 rounding of the motion, so a stored dataset
    reloads exactly.
    """
    seq = _as_float32(generate_motion(config.generator, seed))
    signal = derive_tracking_signal(seq, config.hand_mode)
    signal = TrackingSignal(
        head=signal.head.astype(np.float32), hands=signal.hands.astype(np.float32), fps=signal.fps
    )
    mask = compute_visibility(seq, config.half_angle_deg, config.view_axis)
    detections = geometry.simulate_detections(
        seq,
        mask,
        config.camera,
        config.noise_sigma_m,
        np.random.default_rng([seed, DETECTION_STREAM]),
        hand_mode=config.hand_mode,
        detector=config.detector,
        pixel_noise=config.pixel_noise,
        init_depth=config.init_depth,
        view_axis=config.view_axis,
    )
    detections.values = detections.values.astype(np.float32)
    return seq, signal, mask, detections


def check_seed_ranges(config: models.DataConfig) -> None:
    """Raises ``ConfigError`` when split seed ranges overlap."""
    ranges = sorted(
        (config.split_seeds[split], config.split_seeds[split] + config.split_sizes[split], split)
        for split in enums.Split
    )
    for (_, stop, first), (start, _, second) in zip(ranges, ranges[1:]):
        if start < stop:
            raise ConfigError(f"seed ranges of {first!r} and {second!r} overlap")


def generate_split(config: models.DataConfig, split: enums.Split, seeds: List[int], threads: int = 1) -> DatasetSplit:
    """Generates every sequence of a split, in parallel with a deterministic order."""
    with ThreadPoolExecutor(max_workers=threads) as executor:
        results = list(executor.map(lambda seed: synthesize_sequence(config, seed), seeds))
    return DatasetSplit(
        split=split,
        seeds=list(seeds),
        sequences=[item[0] for item in results],
        signals=[item[1] for item in results],
        masks=[item[2] for item in results],
        detections=[item[3] for item in results],
    )


def build_dataset(
    config: models.DataConfig, directory: pathlib.Path, threads: int = 1
) -> Dict[enums.Split, DatasetSplit]:
    """Generates and persists the train, val and test splits.

    Args:
        config: Data settings including split sizes and first seeds.
        directory: Dataset root; one sub-directory per split.
        threads: Worker threads used to generate sequences.

    Returns:
        Dict[enums.Split, DatasetSplit]:
        Generated splits, equal field-by-field to what loading them back returns.

    Raises:
        ConfigError:
        If seed ranges overlap.
    """
    check_seed_ranges(config)
    splits = {}
    for split in enums.Split:
        seeds = config.seeds(split)
        dataset = generate_split(config, split, seeds, threads)
        visible = np.mean([mask.any(axis=1).mean() for mask in dataset.masks])
        digest = container.write_dataset(
            pathlib.Path(directory) / split, dataset, config.model_dump(mode="json")
        )
        LOGGER.info(
            "Split %s: %d sequences, %.1f%% frames with a visible hand, digest %s",
            split,
            len(dataset),
            100 * visible,
            digest[:12],
        )
        splits[split] = dataset
    return splits
