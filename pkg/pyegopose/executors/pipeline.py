import logging
import pathlib
import time
from typing import Dict, List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from pyegopose.executors import container, squire
from pyegopose.features import guidance, windows
from pyegopose.modules import digests, enums, models
from pyegopose.modules.exceptions import ConfigError, MissingArtifact
from pyegopose.modules.structures import (
    DatasetSplit,
    ImputedTrajectory,
    MotionSequence,
    Skeleton,
    SparseHands,
    TrackingSignal,
)
from pyegopose.networks import denoiser, diffusion, imputer, tokenizer

LOGGER = logging.getLogger("pyegopose")


class PipelineResult(BaseModel):
    """Generated sequences of one input regime over a split.

    >>> PipelineResult

    """

    label: str
    mode: enums.InputMode
    strategy: enums.Strategy
    seeds: List[int]
    sequences: List[MotionSequence]
    variances: List[np.ndarray]
    window_count: int = 0
    seconds: float = 0.0
    steps: int = 1
    checkpoints: Dict[str, str] = Field(default_factory=dict)

    @property
    def seconds_per_window(self) -> float:
        """Mean sampling wall time of one window over every draw."""
        return self.seconds / max(self.window_count, 1)

    class Config:
        """Configuration for pipeline result."""

        arbitrary_types_allowed = True


def checkpoint_digests(env: models.EnvConfig) -> Dict[str, str]:
    """Digests of every checkpoint present under the workspace."""
    found = {}
    for name in (enums.Artifacts.imputer, enums.Artifacts.tokenizer, enums.Artifacts.denoiser):
        directory = squire.checkpoint_path(env, name)
        if (directory / enums.Artifacts.manifest).is_file():
            found[str(name)] = digests.container_digest(directory)
    return found


def require_checkpoints(env: models.EnvConfig, names: List[enums.Artifacts]) -> None:
    """Raises ``MissingArtifact`` listing every absent checkpoint manifest."""
    missing = [
        str(squire.checkpoint_path(env, name) / enums.Artifacts.manifest)
        for name in names
        if not (squire.checkpoint_path(env, name) / enums.Artifacts.manifest).is_file()
    ]
    if missing:
        raise MissingArtifact(missing)


def load_stack(
    env: models.EnvConfig, skeleton: Skeleton, fps: float = 30.0, require_imputer: bool = True
) -> guidance.ModelStack:
    """Loads the trained models of the workspace.

    Args:
        env: Effective configuration.
        skeleton: Skeleton of the generated motion.
        fps: Frame rate of the generated motion.
        require_imputer: Fails when the imputer checkpoint is absent instead of leaving it unset.

    Returns:
        ModelStack:
        Tokenizer, denoiser, schedule and, when present, the imputer.

    Raises:
        MissingArtifact:
        Listing every required checkpoint that is absent.
        ConfigError:
        If the checkpoints were trained for different windows or codebooks.
    """
    required = [enums.Artifacts.tokenizer, enums.Artifacts.denoiser]
    if require_imputer:
        required.insert(0, enums.Artifacts.imputer)
    require_checkpoints(env, required)
    motion_tokenizer = tokenizer.load_tokenizer(squire.checkpoint_path(env, enums.Artifacts.tokenizer), env.device)
    model, schedule = denoiser.load_denoiser(squire.checkpoint_path(env, enums.Artifacts.denoiser), env.device)
    ensemble = None
    imputer_path = squire.checkpoint_path(env, enums.Artifacts.imputer)
    if (imputer_path / enums.Artifacts.manifest).is_file():
        ensemble = imputer.load_imputer(imputer_path, env.device)
    if model.codebook_size != motion_tokenizer.codebook_size:
        raise ConfigError(
            f"denoiser predicts {model.codebook_size} tokens, tokenizer has {motion_tokenizer.codebook_size}"
        )
    if model.window != motion_tokenizer.config.window:
        raise ConfigError(
            f"denoiser window {model.window} differs from tokenizer window {motion_tokenizer.config.window}"
        )
    if ensemble is not None and ensemble.config.window != model.window:
        raise ConfigError(f"imputer window {ensemble.config.window} differs from denoiser window {model.window}")
    return guidance.ModelStack(
        tokenizer=motion_tokenizer,
        denoiser=model,
        schedule=schedule,
        imputer=ensemble,
        skeleton=skeleton,
        fps=fps,
    )


def head_windows(signal: TrackingSignal, window: int, starts: List[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Canonical head windows (N, W, D_head) and their ground-plane offsets (N, 3)."""
    head = np.stack([signal.head[start : start + window] for start in starts]).astype(np.float64)
    offsets = windows.canonical_offset(head)
    return windows.canonicalize_head(head, offsets), offsets


def hand_windows(hands: np.ndarray, window: int, starts: List[int], offsets: np.ndarray) -> np.ndarray:
    """Canonical hand windows (N, W, 2, D_hand) of a dense hand array."""
    stacked = np.stack([hands[start : start + window] for start in starts]).astype(np.float64)
    return windows.canonicalize_hands(stacked, offsets)


def impute_sequence(
    ensemble: imputer.ImputerEnsemble,
    signal: TrackingSignal,
    detections: SparseHands,
    stride: int,
) -> Tuple[np.ndarray, Dict[enums.UncertaintyKind, np.ndarray], np.ndarray]:
    """Imputes a whole sequence window by window.

    Args:
        ensemble: Trained ensemble.
        signal: Tracking signal providing the head features.
        detections: Sparse hand detections.
        stride: Window stride used for stitching.

    Returns:
        Tuple[np.ndarray, Dict[enums.UncertaintyKind, np.ndarray], np.ndarray]:
        World-frame mean (T, 2, D_hand), every uncertainty kind and the detection availability (T, 2).
    """
    window = ensemble.config.window
    frames = len(signal)
    starts = windows.window_starts(frames, window, stride)
    head, offsets = head_windows(signal, window, starts)
    values, available = detections.dense()
    hands = hand_windows(values, window, starts, offsets)
    masks = np.stack([available[start : start + window] for start in starts])
    mean, uncertainty = imputer.impute_windows(ensemble, head, hands * masks[..., None], masks)
    mean = windows.canonicalize_hands(mean, -offsets)
    return (
        windows.stitch(mean, starts, frames, stride),
        {kind: windows.stitch(value, starts, frames, stride) for kind, value in uncertainty.items()},
        available,
    )


def impute_split(
    ensemble: imputer.ImputerEnsemble, dataset: DatasetSplit, stride: int, kind: enums.UncertaintyKind
) -> List[ImputedTrajectory]:
    """Imputed trajectory of every sequence of a split with the selected uncertainty kind."""
    trajectories = []
    for signal, detections in zip(dataset.signals, dataset.detections):
        mean, uncertainty, available = impute_sequence(ensemble, signal, detections, stride)
        trajectories.append(
            ImputedTrajectory(mean=mean, uncertainty=uncertainty[kind], kind=kind, visibility=available)
        )
    return trajectories


def interpolate_split(dataset: DatasetSplit) -> List[np.ndarray]:
    """Linearly interpolated hands of every sequence of a split."""
    interpolated = []
    for detections in dataset.detections:
        values, available = detections.dense()
        interpolated.append(imputer.interpolate_baseline(values, available))
    return interpolated


def window_conditions(
    stack: guidance.ModelStack,
    signal: TrackingSignal,
    detections: SparseHands,
    mode: enums.InputMode,
    kind: enums.UncertaintyKind,
    starts: List[int],
    interpolate: bool = False,
) -> Tuple[np.ndarray, np.ndarray, Tuple[np.ndarray, np.ndarray] | None]:
    """Canonical head windows, offsets and hand conditions of one sequence.

    Args:
        stack: Trained models.
        signal: Tracking signal.
        detections: Sparse hand detections.
        mode: Input regime.
        kind: Uncertainty kind handed to the guidance.
        starts: Window start frames.
        interpolate: Conditions on linearly interpolated detections with zero uncertainty instead of the ensemble.

    Returns:
        Tuple[np.ndarray, np.ndarray, Tuple[np.ndarray, np.ndarray] | None]:
        Head windows, offsets and the hand mean with its uncertainty, ``None`` for head-only generation.
    """
    window = stack.denoiser.window
    head, offsets = head_windows(signal, window, starts)
    if mode == enums.InputMode.head_only:
        return head, offsets, None
    if mode == enums.InputMode.dense_hands:
        hands = hand_windows(signal.hands, window, starts, offsets)
        return head, offsets, (hands, np.zeros_like(hands))
    values, available = detections.dense()
    if interpolate:
        hands = hand_windows(imputer.interpolate_baseline(values, available), window, starts, offsets)
        return head, offsets, (hands, np.zeros_like(hands))
    if stack.imputer is None:
        raise MissingArtifact([f"{enums.Artifacts.imputer} checkpoint needed by the {mode} regime"])
    masks = np.stack([available[start : start + window] for start in starts])
    hands = hand_windows(values, window, starts, offsets) * masks[..., None]
    mean, uncertainty = imputer.impute_windows(stack.imputer, head, hands, masks)
    return head, offsets, (mean, uncertainty[kind])


def generate_sequence(
    stack: guidance.ModelStack,
    signal: TrackingSignal,
    detections: SparseHands,
    mode: enums.InputMode,
    env: models.EnvConfig,
    rng: np.random.Generator,
    stride: int,
    inference_steps: int | None = None,
    interpolate: bool = False,
) -> Tuple[MotionSequence, np.ndarray, int, float]:
    """Generates one full sequence from sliding windows.

    Returns:
        Tuple[MotionSequence, np.ndarray, int, float]:
        Stitched sequence, per-frame positional variance, window count and sampling seconds.
    """
    frames = len(signal)
    starts = windows.window_starts(frames, stack.denoiser.window, stride)
    head, offsets, imputed = window_conditions(
        stack, signal, detections, mode, env.guidance.uncertainty, starts, interpolate
    )
    batch_size = env.evaluation.batch_windows
    outputs, variances, seconds = [], [], 0.0
    for first in range(0, len(starts), batch_size):
        rows = slice(first, first + batch_size)
        started = time.perf_counter()
        chunk, variance = guidance.marginalized_generate(
            stack,
            head[rows],
            None if imputed is None else (imputed[0][rows], imputed[1][rows]),
            env.guidance.strategy,
            env.guidance.n_samples,
            rng,
            offsets=offsets[rows],
            inference_steps=inference_steps,
            invert_dropout=env.guidance.invert_dropout,
        )
        seconds += time.perf_counter() - started
        outputs.extend(chunk)
        variances.append(variance)
    root = np.stack([item.root for item in outputs])
    rotations = np.stack([item.rotations for item in outputs])
    positions = np.stack([item.positions for item in outputs])
    sequence = MotionSequence(
        skeleton=stack.skeleton,
        fps=stack.fps,
        root=windows.stitch(root, starts, frames, stride),
        rotations=windows.stitch_rotations(rotations, starts, frames, stride),
        positions=windows.stitch(positions, starts, frames, stride),
    )
    return sequence, windows.stitch(np.concatenate(variances), starts, frames, stride), len(starts), seconds


def run_pipeline(
    env: models.EnvConfig,
    dataset: DatasetSplit,
    mode: enums.InputMode,
    stack: guidance.ModelStack | None = None,
    stride: int | None = None,
    inference_steps: int | None = None,
    interpolate: bool = False,
    label: str | None = None,
) -> PipelineResult:
    """Runs the end-to-end pipeline over a split in one input regime.

    Args:
        env: Effective configuration; guidance settings select the strategy, uncertainty kind and draws.
        dataset: Split to generate.
        mode: ``head_only`` conditions on the head alone, ``doubly_sparse`` imputes the detected hands and
            ``dense_hands`` conditions on the ground-truth hands with zero uncertainty.
        stack: Preloaded models, loaded from the workspace when ``None``.
        stride: Window stride, ``evaluation.stride`` when ``None``.
        inference_steps: Reverse steps, ``diffusion.inference_steps`` when ``None``.
        interpolate: Replaces the ensemble by linear interpolation of the detections.
        label: Report label, the regime name when ``None``.

    Returns:
        PipelineResult:
        Generated sequences with their variance across draws and the sampling wall time.

    Raises:
        MissingArtifact:
        If a checkpoint required by the regime is absent.
    """
    if stack is None:
        first = dataset.sequences[0]
        needs_imputer = mode == enums.InputMode.doubly_sparse and not interpolate
        stack = load_stack(env, first.skeleton, first.fps, require_imputer=needs_imputer)
    stride = stride or env.evaluation.stride
    inference_steps = inference_steps or env.diffusion.inference_steps
    steps = len(diffusion.step_grid(stack.schedule.steps, inference_steps))
    label = label or str(mode)
    LOGGER.info(
        "Generating %d sequences: %s, %s guidance on %s uncertainty, %d draws, stride %d, %d steps",
        len(dataset),
        label,
        env.guidance.strategy,
        env.guidance.uncertainty,
        env.guidance.n_samples,
        stride,
        steps,
    )
    result = PipelineResult(
        label=label,
        mode=mode,
        strategy=env.guidance.strategy,
        seeds=list(dataset.seeds),
        sequences=[],
        variances=[],
        steps=steps,
        checkpoints=checkpoint_digests(env),
    )
    for seed, signal, detections in tqdm(
        zip(dataset.seeds, dataset.signals, dataset.detections),
        total=len(dataset),
        desc=label,
        disable=not env.progress,
    ):
        rng = np.random.default_rng([env.seed, seed])
        with torch.no_grad():
            sequence, variance, count, seconds = generate_sequence(
                stack, signal, detections, mode, env, rng, stride, inference_steps, interpolate
            )
        result.sequences.append(sequence)
        result.variances.append(variance)
        result.window_count += count
        result.seconds += seconds
    LOGGER.info("%s: %.4f s per window", label, result.seconds_per_window)
    return result


def write_result(directory: pathlib.Path, result: PipelineResult, metadata: Dict) -> str:
    """Persists the sequences of a pipeline run."""
    return container.write_predictions(
        directory,
        result.seeds,
        result.sequences,
        result.variances,
        {
            **metadata,
            "label": result.label,
            "mode": str(result.mode),
            "strategy": str(result.strategy),
            "steps": result.steps,
            "windows": result.window_count,
            "seconds": result.seconds,
        },
    )
