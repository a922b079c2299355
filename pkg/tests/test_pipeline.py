import json

import pytest
import torch

from pyegopose import main
from pyegopose.executors import container, pipeline, squire
from pyegopose.features import guidance
from pyegopose.modules import enums, models
from pyegopose.networks import denoiser, diffusion, tokenizer
from pyegopose.reports import evaluation

COMMANDS = ("gen-data", "train-mae", "train-vqvae", "train-diffusion", "impute", "generate", "evaluate", "plot")


def untrained_stack(skeleton, window: int = 8, steps: int = 4) -> guidance.ModelStack:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        motion_tokenizer = tokenizer.MotionTokenizer(
            models.TokenizerConfig(window=window, codebook_size=5, code_dim=8, hidden=8, depth=1),
            3 + 6 * skeleton.joint_count,
        )
        config = models.DiffusionConfig(steps=steps, d_model=8, heads=2, layers=1, ff_mult=2)
        model = denoiser.MotionDenoiser(config, 5, window, 9)
    schedule = diffusion.build_transition_schedule(steps, 5, config.schedule)
    return guidance.ModelStack(
        tokenizer=motion_tokenizer.eval(), denoiser=model.eval(), schedule=schedule, skeleton=skeleton
    )


@pytest.mark.parametrize("inference_steps, expected", [(None, 4), (2, 2), (1, 1)])
def test_reported_steps_match_the_reverse_chain(tiny_env, test_split, skeleton, inference_steps, expected):
    result = pipeline.run_pipeline(
        tiny_env,
        test_split,
        enums.InputMode.head_only,
        stack=untrained_stack(skeleton),
        stride=8,
        inference_steps=inference_steps,
    )
    assert result.steps == expected == len(diffusion.step_grid(4, inference_steps))
    assert len(result.sequences) == len(test_split)


@pytest.mark.slow
def test_every_command_runs_end_to_end(config_file, monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    manifests = {
        command: main.start(command, env_file=str(config_file), split=enums.Split.test) for command in COMMANDS
    }
    for command, filepath in manifests.items():
        assert json.loads(filepath.read_text())["command"] == command

    env = squire.load_env(env_file=config_file)
    reports = squire.artifact_path(env, enums.Artifacts.reports, enums.Split.test)
    report = evaluation.read_report(reports / enums.Artifacts.report_json)
    labels = {row.label for row in report.rows}
    assert {"head_only", "doubly_sparse", "dense_hands", "interpolation", "reconstruction"} <= labels
    assert {row.label for row in report.imputation} <= {"ensemble", "interpolation"}

    _, sequences, variances = container.read_predictions(
        squire.artifact_path(env, enums.Artifacts.predictions, enums.Split.test, enums.InputMode.doubly_sparse)
    )
    assert len(sequences) == len(variances) == 2
    assert sequences[0].positions.shape[0] == env.data.generator.frames
    assert list(squire.artifact_path(env, enums.Artifacts.plots, enums.Split.test).glob("*.svg"))


@pytest.mark.slow
def test_manifest_replay_reproduces_the_data(config_file, monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    first = main.start("gen-data", env_file=str(config_file), out=tmp_path / "first")
    main.start("gen-data", env_file=str(first), out=tmp_path / "second")
    for split in enums.Split:
        assert container.read_container_metadata(tmp_path / "first" / split)["seeds"] == (
            container.read_container_metadata(tmp_path / "second" / split)["seeds"]
        )
        left = (tmp_path / "first" / split / "rotations.bin").read_bytes()
        assert left == (tmp_path / "second" / split / "rotations.bin").read_bytes()


@pytest.mark.slow
def test_manifest_replay_reproduces_the_evaluation(config_file, monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for command in COMMANDS[:4]:
        trained = main.start(command, env_file=str(config_file))
    first = main.start("evaluate", env_file=str(trained), split=enums.Split.test, out=tmp_path / "first")
    second = main.start("evaluate", env_file=str(trained), split=enums.Split.test, out=tmp_path / "second")
    assert json.loads(first.read_text())["metrics"] == json.loads(second.read_text())["metrics"]
    reports = [evaluation.read_report(tmp_path / name / enums.Artifacts.report_json) for name in ("first", "second")]
    for field in ("rows", "sequences", "imputation", "calibration", "visibility"):
        assert getattr(reports[0], field) == getattr(reports[1], field)
    assert reports[0].config_hash == reports[1].config_hash
