import logging
import warnings
from typing import List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, model_validator

from pyegopose.features import kinematics, windows
from pyegopose.modules import enums
from pyegopose.modules.exceptions import ConfigError, DomainError, raise_shape_error
from pyegopose.modules.structures import ImputedTrajectory, MotionSequence, Skeleton
from pyegopose.networks import diffusion, tokenizer

LOGGER = logging.getLogger("pyegopose")
TIME_AXIS = -3


class InvertedDropoutWarning(Warning):
    """Warning raised when the dropout strategy zeroes the most uncertain values first.

    >>> InvertedDropoutWarning

    """


class ConditioningVector(BaseModel):
    """Raw per-frame condition of one window before the denoiser embeds it.

    >>> ConditioningVector

    """

    head: np.ndarray
    hands: np.ndarray | None = None
    uncertainty: np.ndarray | None = None
    strategy: enums.Strategy = enums.Strategy.none

    @model_validator(mode="after")
    def aligned(self) -> "ConditioningVector":
        """Every part covers the same frames and is finite."""
        for name in ("hands", "uncertainty"):
            value = getattr(self, name)
            if value is None:
                continue
            if value.shape[0] != self.head.shape[0]:
                raise_shape_error(name, self.head.shape[0], value.shape[0])
            if not np.all(np.isfinite(value)):
                raise DomainError(f"{name} must be finite")
        return self

    class Config:
        """Configuration for conditioning vector."""

        arbitrary_types_allowed = True


class ModelStack(BaseModel):
    """Trained models shared by every generation call.

    >>> ModelStack

    """

    tokenizer: torch.nn.Module
    denoiser: torch.nn.Module
    schedule: diffusion.TransitionSchedule
    imputer: torch.nn.Module | None = None
    skeleton: Skeleton
    fps: float = 30.0

    class Config:
        """Configuration for model stack."""

        arbitrary_types_allowed = True


def dropout_probabilities(uncertainty: np.ndarray, invert: bool = False) -> np.ndarray:
    """Per-element zeroing probability from the uncertainty range of each dimension over the window.

    Args:
        uncertainty: Uncertainty (..., T, 2, D_hand).
        invert: Zeroes the most uncertain elements first instead of the least uncertain.

    Returns:
        np.ndarray:
        Probabilities of the same shape; dimensions whose uncertainty is constant are never zeroed.
    """
    low = uncertainty.min(axis=TIME_AXIS, keepdims=True)
    span = uncertainty.max(axis=TIME_AXIS, keepdims=True) - low
    scaled = (uncertainty - low) / np.where(span > 0, span, 1.0)
    if invert:
        return np.where(span > 0, scaled, 0.0)
    return np.where(span > 0, 1.0 - scaled, 0.0)


def guide_hands(
    mean: np.ndarray,
    uncertainty: np.ndarray,
    strategy: enums.Strategy,
    rng: np.random.Generator,
    invert_dropout: bool = False,
) -> np.ndarray:
    """Hand condition values of one or more windows under a guidance strategy.

    Args:
        mean: Imputed mean (..., T, 2, D_hand).
        uncertainty: Selected uncertainty, same shape.
        strategy: Guidance strategy.
        rng: Random source; only ``sample`` and ``dropout`` draw from it.
        invert_dropout: Inverts the dropout ranking.

    Returns:
        np.ndarray:
        Guided hand values.

    Raises:
        DomainError:
        If any uncertainty is negative.
    """
    if np.any(uncertainty < 0):
        raise DomainError("uncertainty must be non-negative")
    if strategy == enums.Strategy.sample:
        return mean + np.sqrt(uncertainty) * rng.standard_normal(mean.shape)
    if strategy == enums.Strategy.dropout:
        keep = rng.random(mean.shape) >= dropout_probabilities(uncertainty, invert_dropout)
        return np.where(keep, mean, 0.0)
    return np.array(mean, dtype=np.float64, copy=True)


def make_condition(
    head: np.ndarray,
    imputed: ImputedTrajectory | None,
    strategy: enums.Strategy,
    rng: np.random.Generator,
    invert_dropout: bool = False,
) -> ConditioningVector:
    """Condition of one window from the head features and the imputed hands.

    Args:
        head: Head features (T, D_head).
        imputed: Imputed hands, ``None`` to condition on the head alone.
        strategy: Guidance strategy.
        rng: Random source.
        invert_dropout: Inverts the dropout ranking.

    Returns:
        ConditioningVector:
        Head features, guided hands and, for the distribution strategy, the uncertainty.
    """
    if invert_dropout and strategy == enums.Strategy.dropout:
        warnings.warn("dropout zeroes the most uncertain values first", InvertedDropoutWarning)
    if imputed is None:
        return ConditioningVector(head=head, strategy=strategy)
    if len(imputed) != head.shape[0]:
        raise_shape_error("imputed", head.shape[0], len(imputed))
    return ConditioningVector(
        head=head,
        hands=guide_hands(imputed.mean, imputed.uncertainty, strategy, rng, invert_dropout),
        uncertainty=imputed.uncertainty if strategy == enums.Strategy.dist_embed else None,
        strategy=strategy,
    )


def chordal_mean(matrices: np.ndarray) -> np.ndarray:
    """Rotation closest to the arithmetic mean of rotation matrices stacked on the first axis."""
    return kinematics.nearest_rotation(matrices.mean(axis=0))


def marginalized_generate(
    stack: ModelStack,
    head: np.ndarray,
    imputed: Tuple[np.ndarray, np.ndarray] | None,
    strategy: enums.Strategy,
    n_samples: int,
    rng: np.random.Generator,
    offsets: np.ndarray | None = None,
    inference_steps: int | None = None,
    draw_seeds: List[int] | None = None,
    invert_dropout: bool = False,
) -> Tuple[List[MotionSequence], np.ndarray]:
    """Generates canonical windows averaged over several guided draws.

    Args:
        stack: Trained tokenizer, denoiser and schedule.
        head: Canonical head features (B, T, D_head).
        imputed: Imputed mean and uncertainty (B, T, 2, D_hand), ``None`` for head-only generation.
        strategy: Guidance strategy.
        n_samples: Number of draws.
        rng: Source of the per-draw seeds.
        offsets: Ground-plane offsets (B, 3) added back to every window.
        inference_steps: Reverse steps per draw.
        draw_seeds: Explicit per-draw seeds, overriding ``rng``.
        invert_dropout: Inverts the dropout ranking.

    Returns:
        Tuple[List[MotionSequence], np.ndarray]:
        One sequence per window with averaged positions, and the per-frame positional variance
        across draws (B, T).

    Raises:
        ConfigError:
        If the distribution strategy is requested from a denoiser trained without it.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, received {n_samples}")
    if strategy == enums.Strategy.dist_embed and not stack.denoiser.distribution:
        raise ConfigError("dist-embed guidance needs a denoiser trained with the dist-embed strategy")
    if invert_dropout and strategy == enums.Strategy.dropout:
        warnings.warn("dropout zeroes the most uncertain values first", InvertedDropoutWarning)
    batch, window = head.shape[:2]
    seeds = draw_seeds if draw_seeds is not None else rng.integers(0, 2**32, size=n_samples).tolist()
    if len(seeds) != n_samples:
        raise_shape_error("draw_seeds", n_samples, len(seeds))
    hands = uncertainty = None
    if imputed is not None:
        mean, uncertainty = imputed
        hands = np.concatenate(
            [
                guide_hands(mean, uncertainty, strategy, np.random.default_rng(seed), invert_dropout)
                for seed in seeds
            ]
        )
        uncertainty = np.concatenate([uncertainty] * n_samples)
    condition = stack.denoiser.condition_tensors(np.concatenate([head] * n_samples), hands, uncertainty)
    generators = [torch.Generator().manual_seed(int(seed)) for seed in seeds]
    tokens = diffusion.sample_tokens(
        stack.denoiser, condition, stack.schedule, (n_samples * batch, window), inference_steps, generators
    )
    joints = stack.skeleton.joint_count
    root, rotations = windows.split_motion_features(
        tokenizer.detokenize_windows(stack.tokenizer, tokens), joints, np.zeros((n_samples * batch, 3))
    )
    positions, _ = kinematics.sequence_kinematics(
        stack.skeleton, root.reshape(-1, 3), rotations.reshape(-1, joints, 6)
    )
    positions = positions.reshape(n_samples, batch, window, joints, 3)
    root = root.reshape(n_samples, batch, window, 3)
    rotations = rotations.reshape(n_samples, batch, window, joints, 6)
    if n_samples == 1:
        root, rotations, positions = root[0], rotations[0], positions[0]
        variance = np.zeros((batch, window))
    else:
        variance = positions.var(axis=0).sum(axis=-1).mean(axis=-1)
        rotations = kinematics.matrix_to_rot6d(chordal_mean(kinematics.rot6d_to_matrix(rotations)))
        root, positions = root.mean(axis=0), positions.mean(axis=0)
    if offsets is not None:
        root = root + offsets[:, None, :]
        positions = positions + offsets[:, None, None, :]
    sequences = [
        MotionSequence(
            skeleton=stack.skeleton,
            fps=stack.fps,
            root=root[index],
            rotations=rotations[index],
            positions=positions[index],
        )
        for index in range(batch)
    ]
    return sequences, variance
