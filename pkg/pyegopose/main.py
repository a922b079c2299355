import logging
import pathlib
import time
from datetime import timedelta
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

from pyegopose import startup, version
from pyegopose.executors import container, pipeline, squire
from pyegopose.features import kinematics, synthesis
from pyegopose.modules import digests, enums, models, payloads
from pyegopose.modules.exceptions import MissingArtifact
from pyegopose.modules.structures import DatasetSplit
from pyegopose.networks import denoiser, diffusion, imputer, tokenizer
from pyegopose.reports import evaluation, plots

LOGGER = logging.getLogger("pyegopose")

CommandResult = Tuple[pathlib.Path, Dict[str, str], Dict[str, float]]


def load_split(env: models.EnvConfig, split: enums.Split) -> DatasetSplit:
    """Reads a generated split from the workspace."""
    directory = squire.artifact_path(env, enums.Artifacts.data, split)
    if not (directory / enums.Artifacts.manifest).is_file():
        raise MissingArtifact([f"{directory / enums.Artifacts.manifest} (run gen-data first)"])
    return container.read_dataset(directory)


def noise_floor(env: models.EnvConfig) -> float:
    """Detector noise used as the uncertainty floor of detected hand positions."""
    return env.data.noise_sigma_m if env.data.detector == enums.Detector.gaussian else 0.0


def gen_data(env: models.EnvConfig, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Generates and stores the train, val and test splits."""
    directory = out or squire.artifact_path(env, enums.Artifacts.data)
    splits = synthesis.build_dataset(env.data, directory, env.threads)
    metrics = {
        f"{split}_visibility_ratio": float(np.mean([mask.mean() for mask in dataset.masks]))
        for split, dataset in splits.items()
    }
    return directory, {}, metrics


def train_mae(env: models.EnvConfig, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Trains and stores the imputer ensemble."""
    train = load_split(env, enums.Split.train)
    ensemble = imputer.train_imputer_ensemble(train, env.imputer, noise_floor(env), env.progress, env.device)
    directory = out or squire.checkpoint_path(env, enums.Artifacts.imputer)
    digest = imputer.save_imputer(ensemble, directory, {"seed": env.imputer.seed})
    metrics = {f"member_{index}_loss": history[-1] for index, history in enumerate(ensemble.history)}
    val = load_split(env, enums.Split.val)
    estimates = [
        pipeline.impute_sequence(ensemble, signal, detections, env.evaluation.stride)[0]
        for signal, detections in zip(val.signals, val.detections)
    ]
    for label, values in (("ensemble", estimates), ("interpolation", pipeline.interpolate_split(val))):
        errors, _ = evaluation.invisible_hand_errors(values, val)
        if errors:
            metrics[f"val_{label}_error_cm"] = float(np.mean(errors))
    return directory, {str(enums.Artifacts.imputer): digest}, metrics


def train_vqvae(env: models.EnvConfig, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Trains and stores the motion tokenizer."""
    train = load_split(env, enums.Split.train)
    val = load_split(env, enums.Split.val)
    motion_tokenizer = tokenizer.train_tokenizer(train, env.tokenizer, val, env.progress, env.device)
    directory = out or squire.checkpoint_path(env, enums.Artifacts.tokenizer)
    digest = tokenizer.save_tokenizer(motion_tokenizer, directory, {"seed": env.tokenizer.seed})
    metrics = {"final_loss": motion_tokenizer.history[-1], **motion_tokenizer.statistics}
    return directory, {str(enums.Artifacts.tokenizer): digest}, metrics


def train_diffusion(env: models.EnvConfig, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Trains and stores the denoiser on tokens of the stored tokenizer and conditions of the stored imputer."""
    pipeline.require_checkpoints(env, [enums.Artifacts.imputer, enums.Artifacts.tokenizer])
    train = load_split(env, enums.Split.train)
    motion_tokenizer = tokenizer.load_tokenizer(squire.checkpoint_path(env, enums.Artifacts.tokenizer), env.device)
    ensemble = imputer.load_imputer(squire.checkpoint_path(env, enums.Artifacts.imputer), env.device)
    windows = denoiser.build_denoiser_windows(
        train, motion_tokenizer, ensemble, env.diffusion, motion_tokenizer.config.window
    )
    schedule = diffusion.build_transition_schedule(
        env.diffusion.steps, motion_tokenizer.codebook_size, env.diffusion.schedule
    )
    model = denoiser.train_denoiser(
        windows, schedule, env.diffusion, motion_tokenizer.codebook_size, env.progress, env.device
    )
    directory = out or squire.checkpoint_path(env, enums.Artifacts.denoiser)
    digest = denoiser.save_denoiser(model, schedule, directory, {"seed": env.diffusion.seed})
    checkpoints = pipeline.checkpoint_digests(env)
    checkpoints[str(enums.Artifacts.denoiser)] = digest
    return directory, checkpoints, {"final_loss": model.history[-1]}


def impute(env: models.EnvConfig, split: enums.Split, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Imputes the hands of every sequence of a split with the selected uncertainty kind."""
    pipeline.require_checkpoints(env, [enums.Artifacts.imputer])
    dataset = load_split(env, split)
    ensemble = imputer.load_imputer(squire.checkpoint_path(env, enums.Artifacts.imputer), env.device)
    trajectories = pipeline.impute_split(ensemble, dataset, env.evaluation.stride, env.guidance.uncertainty)
    directory = out or squire.artifact_path(env, enums.Artifacts.imputed, split)
    container.write_imputed(
        directory, dataset.seeds, trajectories, {"split": str(split), "stride": env.evaluation.stride}
    )
    errors, frames = evaluation.invisible_hand_errors([item.mean for item in trajectories], dataset)
    metrics = {"hidden_hand_frames": float(frames)}
    if errors:
        metrics["error_cm"] = float(np.mean(errors))
    return directory, pipeline.checkpoint_digests(env), metrics


def generate(
    env: models.EnvConfig,
    split: enums.Split,
    mode: enums.InputMode = enums.InputMode.doubly_sparse,
    out: pathlib.Path | None = None,
    **_,
) -> CommandResult:
    """Generates full-body motion for every sequence of a split in one input regime."""
    dataset = load_split(env, split)
    result = pipeline.run_pipeline(env, dataset, mode)
    directory = out or squire.artifact_path(env, enums.Artifacts.predictions, split, mode)
    pipeline.write_result(directory, result, {"split": str(split), "stride": env.evaluation.stride})
    mpjpe = [
        kinematics.compute_metrics(prediction, truth).mpjpe
        for prediction, truth in zip(result.sequences, dataset.sequences)
    ]
    metrics = {"mpjpe": float(np.mean(mpjpe)), "seconds_per_window": result.seconds_per_window}
    return directory, result.checkpoints, metrics


def evaluate(env: models.EnvConfig, split: enums.Split, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Runs every configured regime with its baselines and writes the evaluation report."""
    dataset = load_split(env, split)
    first = dataset.sequences[0]
    needs_imputer = enums.InputMode.doubly_sparse in env.evaluation.modes
    stack = pipeline.load_stack(env, first.skeleton, first.fps, require_imputer=needs_imputer)
    results: List[pipeline.PipelineResult] = [
        pipeline.run_pipeline(env, dataset, mode, stack=stack) for mode in env.evaluation.modes
    ]
    imputation, uncertainties = {}, {}
    if enums.InputMode.doubly_sparse in env.evaluation.modes:
        results.append(
            pipeline.run_pipeline(
                env, dataset, enums.InputMode.doubly_sparse, stack, interpolate=True, label="interpolation"
            )
        )
        imputed = [
            pipeline.impute_sequence(stack.imputer, signal, detections, env.evaluation.stride)
            for signal, detections in zip(dataset.signals, dataset.detections)
        ]
        imputation = {
            "ensemble": [item[0] for item in imputed],
            "interpolation": pipeline.interpolate_split(dataset),
        }
        uncertainties = {kind: [item[1][kind] for item in imputed] for kind in enums.UncertaintyKind}
    predictions = {result.label: result.sequences for result in results}
    predictions["reconstruction"] = [
        tokenizer.reconstruct_sequence(stack.tokenizer, sequence, signal.head, env.evaluation.stride)
        for sequence, signal in zip(dataset.sequences, dataset.signals)
    ]
    report = evaluation.evaluate_report(
        predictions,
        dataset,
        env.evaluation,
        header={
            "config_hash": digests.calculate_hash(startup.effective_config(env)),
            "stride": env.evaluation.stride,
            "strategy": env.guidance.strategy,
            "uncertainty": env.guidance.uncertainty,
            "n_samples": env.guidance.n_samples,
        },
        seed=env.seed,
        imputation=imputation,
        uncertainties=uncertainties,
        timing=[
            payloads.TimingRow(label=result.label, steps=result.steps, seconds_per_window=result.seconds_per_window)
            for result in results
        ],
    )
    directory = out or squire.artifact_path(env, enums.Artifacts.reports, split)
    evaluation.write_report(directory, report)
    metrics = {
        f"{row.label}_{name}": interval.mean for row in report.rows for name, interval in row.metrics.items()
    }
    metrics.update({f"imputation_{row.label}_cm": row.error.mean for row in report.imputation})
    return directory, pipeline.checkpoint_digests(env), metrics


def plot(env: models.EnvConfig, split: enums.Split, out: pathlib.Path | None = None, **_) -> CommandResult:
    """Plots the stored imputed trajectories of a split against the ground truth."""
    dataset = load_split(env, split)
    metadata, trajectories = container.read_imputed(squire.artifact_path(env, enums.Artifacts.imputed, split))
    directory = out or squire.artifact_path(env, enums.Artifacts.plots, split)
    written = 0
    for seed, trajectory, signal, mask in zip(metadata["seeds"], trajectories, dataset.signals, dataset.masks):
        written += len(plots.emit_plots(trajectory, signal.hands, mask, directory, name=f"sequence_{seed}"))
    return directory, {}, {"files": float(written)}


COMMANDS: Dict[str, Callable[..., CommandResult]] = {
    "gen-data": gen_data,
    "train-mae": train_mae,
    "train-vqvae": train_vqvae,
    "train-diffusion": train_diffusion,
    "impute": impute,
    "generate": generate,
    "evaluate": evaluate,
    "plot": plot,
}


def start(
    command: str, env_file: str | None = None, overrides: Dict[str, Any] | None = None, **kwargs
) -> pathlib.Path:
    """Runs one pipeline command and records its run manifest.

    Args:
        command: One of ``gen-data``, ``train-mae``, ``train-vqvae``, ``train-diffusion``, ``impute``,
            ``generate``, ``evaluate`` or ``plot``.
        env_file: Configuration filepath, a previous run manifest included.
        overrides: Settings overriding the configuration file.

    Keyword Args:
        split: Dataset split consumed by the command.
        mode: Input regime of ``generate``.
        out: Output directory replacing the workspace default.

    Returns:
        pathlib.Path:
        Path of the written run manifest.
    """
    env = startup.initialize(env_file=env_file, **(overrides or {}))
    LOGGER.info("PyEgoPose %s: %s", version.__version__, command)
    started = time.perf_counter()
    directory, checkpoints, metrics = COMMANDS[command](env, **kwargs)
    elapsed = timedelta(seconds=time.perf_counter() - started)
    LOGGER.info("%s finished in %s", command, squire.format_timedelta(elapsed))
    return startup.write_run_manifest(directory, command, env, elapsed, checkpoints, metrics)
