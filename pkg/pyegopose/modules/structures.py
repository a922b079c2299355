from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, PositiveFloat, model_validator

from pyegopose.modules import enums
from pyegopose.modules.exceptions import ConfigError, DomainError, raise_shape_error

HEAD_JOINT = "head"
WRIST_JOINTS = ("left_wrist", "right_wrist")


class Skeleton(BaseModel):
    """Articulated body description in topological order.

    >>> Skeleton

    """

    names: List[str]
    parents: List[int]
    offsets: np.ndarray
    regions: List[enums.Region]

    @model_validator(mode="after")
    def topological(self) -> "Skeleton":
        """Validates parent ordering, root count and offsets."""
        joint_count = len(self.names)
        if len(self.parents) != joint_count or len(self.regions) != joint_count:
            raise_shape_error("skeleton", joint_count, (len(self.parents), len(self.regions)))
        if self.offsets.shape != (joint_count, 3):
            raise_shape_error("offsets", (joint_count, 3), self.offsets.shape)
        roots = [idx for idx, parent in enumerate(self.parents) if parent < 0]
        if roots != [0]:
            raise ConfigError(f"skeleton needs exactly one root at index 0, found {roots}")
        for idx, parent in enumerate(self.parents[1:], start=1):
            if parent >= idx:
                raise ConfigError(f"joint {self.names[idx]!r} has parent {parent} not preceding it")
        if not np.all(np.isfinite(self.offsets)):
            raise ConfigError("skeleton offsets must be finite")
        return self

    @property
    def joint_count(self) -> int:
        """Number of joints."""
        return len(self.names)

    def index(self, name: str) -> int:
        """Index of a named joint.

        Args:
            name: Joint name.

        Raises:
            ConfigError:
            If the joint is not designated in the skeleton.
        """
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"skeleton has no joint named {name!r}")

    def region_indices(self, region: enums.Region) -> List[int]:
        """Joint indices labelled with a body region."""
        return [idx for idx, label in enumerate(self.regions) if label == region]

    def matches(self, other: "Skeleton") -> bool:
        """Structural equality, used to pair sequences for metrics."""
        return (
            self.names == other.names
            and self.parents == other.parents
            and np.array_equal(self.offsets, other.offsets)
        )

    class Config:
        """Configuration for skeleton."""

        arbitrary_types_allowed = True


class Pose(BaseModel):
    """Single-frame body pose: root position and per-joint 6D local rotations.

    >>> Pose

    """

    root: np.ndarray
    rotations: np.ndarray

    @model_validator(mode="after")
    def shapes(self) -> "Pose":
        """Validates the array shapes."""
        if self.root.shape != (3,):
            raise_shape_error("root", (3,), self.root.shape)
        if self.rotations.ndim != 2 or self.rotations.shape[1] != 6:
            raise_shape_error("rotations", "(J, 6)", self.rotations.shape)
        return self

    class Config:
        """Configuration for pose."""

        arbitrary_types_allowed = True


class MotionSequence(BaseModel):
    """Ordered poses sharing one skeleton.

    >>> MotionSequence

    See Also:
        - Arrays are stored frame-major: ``root`` is (T, 3) and ``rotations`` is (T, J, 6).
        - ``positions`` (T, J, 3) is only set for sequences whose joint positions are not the
          forward kinematics of their rotations, such as averages of several generated draws.
    """

    skeleton: Skeleton
    fps: PositiveFloat = 30.0
    root: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray | None = None

    @model_validator(mode="after")
    def shapes(self) -> "MotionSequence":
        """Validates every array against the skeleton and the frame count."""
        frames, joints = self.root.shape[0], self.skeleton.joint_count
        if self.root.ndim != 2 or self.root.shape[1] != 3:
            raise_shape_error("root", "(T, 3)", self.root.shape)
        if self.rotations.shape != (frames, joints, 6):
            raise_shape_error("rotations", (frames, joints, 6), self.rotations.shape)
        if self.positions is not None and self.positions.shape != (frames, joints, 3):
            raise_shape_error("positions", (frames, joints, 3), self.positions.shape)
        return self

    def __len__(self) -> int:
        """Number of frames."""
        return self.root.shape[0]

    def __getitem__(self, frame: int) -> Pose:
        """Pose at a frame index."""
        return Pose(root=self.root[frame], rotations=self.rotations[frame])

    @property
    def poses(self) -> List[Pose]:
        """Every frame as a ``Pose``."""
        return [self[frame] for frame in range(len(self))]

    @classmethod
    def from_poses(cls, skeleton: Skeleton, poses: List[Pose], fps: float = 30.0) -> "MotionSequence":
        """Stacks a list of poses into a sequence.

        Args:
            skeleton: Shared skeleton.
            poses: Ordered poses.
            fps: Frame rate in Hz.

        Returns:
            MotionSequence:
            Sequence holding the stacked arrays.
        """
        return cls(
            skeleton=skeleton,
            fps=fps,
            root=np.stack([pose.root for pose in poses]),
            rotations=np.stack([pose.rotations for pose in poses]),
        )

    def window(self, start: int, length: int) -> "MotionSequence":
        """Contiguous slice of frames."""
        stop = start + length
        if start < 0 or stop > len(self):
            raise_shape_error("window", f"[0, {len(self)}]", (start, stop))
        return MotionSequence(
            skeleton=self.skeleton,
            fps=self.fps,
            root=self.root[start:stop],
            rotations=self.rotations[start:stop],
            positions=None if self.positions is None else self.positions[start:stop],
        )

    class Config:
        """Configuration for motion sequence."""

        arbitrary_types_allowed = True


class TrackingSignal(BaseModel):
    """Head features and dense per-hand states of one sequence.

    >>> TrackingSignal

    """

    head: np.ndarray
    hands: np.ndarray
    fps: PositiveFloat = 30.0

    @model_validator(mode="after")
    def shapes(self) -> "TrackingSignal":
        """Validates dimensions, lengths and finiteness."""
        frames = self.head.shape[0]
        if self.head.ndim != 2:
            raise_shape_error("head", "(T, D_head)", self.head.shape)
        if self.hands.ndim != 3 or self.hands.shape[:2] != (frames, 2) or self.hands.shape[2] not in (3, 9):
            raise_shape_error("hands", f"({frames}, 2, 3|9)", self.hands.shape)
        if not (np.all(np.isfinite(self.head)) and np.all(np.isfinite(self.hands))):
            raise ConfigError("tracking signal must be finite")
        return self

    @property
    def hand_dim(self) -> int:
        """Per-hand state dimension."""
        return self.hands.shape[2]

    def __len__(self) -> int:
        """Number of frames."""
        return self.head.shape[0]

    class Config:
        """Configuration for tracking signal."""

        arbitrary_types_allowed = True


class SparseHands(BaseModel):
    """Frame-indexed table of hand detections.

    >>> SparseHands

    """

    frame_count: int
    frames: np.ndarray
    sides: np.ndarray
    values: np.ndarray

    @model_validator(mode="after")
    def shapes(self) -> "SparseHands":
        """Validates the table columns."""
        rows = self.frames.shape[0]
        if self.sides.shape != (rows,) or self.values.ndim != 2 or self.values.shape[0] != rows:
            raise_shape_error("detections", f"{rows} rows", (self.sides.shape, self.values.shape))
        if rows and (self.frames.min() < 0 or self.frames.max() >= self.frame_count):
            raise_shape_error("frames", f"[0, {self.frame_count})", (self.frames.min(), self.frames.max()))
        return self

    def __len__(self) -> int:
        """Number of detections."""
        return self.frames.shape[0]

    @property
    def hand_dim(self) -> int:
        """Per-hand state dimension."""
        return self.values.shape[1]

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Scatters the table onto the frame grid.

        Returns:
            Tuple[np.ndarray, np.ndarray]:
            Values of shape (T, 2, D) with zeros where absent and a boolean availability mask (T, 2).
        """
        values = np.zeros((self.frame_count, 2, self.hand_dim), dtype=self.values.dtype)
        mask = np.zeros((self.frame_count, 2), dtype=bool)
        values[self.frames, self.sides] = self.values
        mask[self.frames, self.sides] = True
        return values, mask

    @classmethod
    def from_dense(cls, values: np.ndarray, mask: np.ndarray) -> "SparseHands":
        """Gathers the entries of a dense array selected by a mask, frame-major then side."""
        frames, sides = np.nonzero(mask)
        return cls(
            frame_count=mask.shape[0],
            frames=frames.astype(np.int32),
            sides=sides.astype(np.int32),
            values=values[frames, sides],
        )

    class Config:
        """Configuration for sparse hands."""

        arbitrary_types_allowed = True


class HandObservation(BaseModel):
    """Emulated detector output for one hand in one frame.

    >>> HandObservation

    """

    frame: int
    side: int
    local3d: np.ndarray
    obs2d: np.ndarray
    recovered: np.ndarray | None = None
    valid: bool = False

    class Config:
        """Configuration for hand observation."""

        arbitrary_types_allowed = True


class OffsetSolution(BaseModel):
    """Result of the wrist offset reprojection solve.

    >>> OffsetSolution

    """

    offset: np.ndarray
    rms: float
    iterations: int
    history: List[float]

    class Config:
        """Configuration for offset solution."""

        arbitrary_types_allowed = True


class DatasetSplit(BaseModel):
    """Sequences of one split with their tracking signals, visibility and detections.

    >>> DatasetSplit

    """

    split: enums.Split
    seeds: List[int]
    sequences: List[MotionSequence]
    signals: List[TrackingSignal]
    masks: List[np.ndarray]
    detections: List[SparseHands]

    @model_validator(mode="after")
    def aligned(self) -> "DatasetSplit":
        """Every field holds one entry per seed."""
        counts = {len(self.sequences), len(self.signals), len(self.masks), len(self.detections)}
        if counts != {len(self.seeds)}:
            raise_shape_error("dataset", len(self.seeds), sorted(counts))
        return self

    def __len__(self) -> int:
        """Number of sequences."""
        return len(self.seeds)

    class Config:
        """Configuration for dataset split."""

        arbitrary_types_allowed = True


class ImputedTrajectory(BaseModel):
    """Dense hand trajectory with per-dimension uncertainty.

    >>> ImputedTrajectory

    """

    mean: np.ndarray
    uncertainty: np.ndarray
    kind: enums.UncertaintyKind
    visibility: np.ndarray

    @model_validator(mode="after")
    def shapes(self) -> "ImputedTrajectory":
        """Validates shapes and non-negativity."""
        if self.mean.ndim != 3 or self.mean.shape[1] != 2:
            raise_shape_error("mean", "(T, 2, D_hand)", self.mean.shape)
        if self.uncertainty.shape != self.mean.shape:
            raise_shape_error("uncertainty", self.mean.shape, self.uncertainty.shape)
        if self.visibility.shape != self.mean.shape[:2]:
            raise_shape_error("visibility", self.mean.shape[:2], self.visibility.shape)
        if np.any(self.uncertainty < 0):
            raise DomainError("uncertainty must be non-negative")
        return self

    def __len__(self) -> int:
        """Number of frames."""
        return self.mean.shape[0]

    class Config:
        """Configuration for imputed trajectory."""

        arbitrary_types_allowed = True
