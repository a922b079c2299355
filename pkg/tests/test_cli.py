from click.testing import CliRunner

from pyegopose import commandline, guidance_overrides, version
from pyegopose.modules import enums


def test_version():
    result = CliRunner().invoke(commandline, ["--version"])
    assert result.exit_code == 0
    assert version.__version__ in result.output


def test_no_command_prints_help():
    result = CliRunner().invoke(commandline, [])
    assert result.exit_code == 1
    assert "No command provided" in result.output


def test_commands_are_registered():
    assert set(commandline.commands) == {
        "gen-data",
        "train-mae",
        "train-vqvae",
        "train-diffusion",
        "impute",
        "generate",
        "evaluate",
        "plot",
    }


def test_missing_split_exits_with_missing_artifact(config_file):
    result = CliRunner().invoke(commandline, ["evaluate", "-C", str(config_file), "--split", "test"])
    assert result.exit_code == int(enums.ExitCode.missing_artifact)
    assert "MissingArtifact" in result.output


def test_bad_configuration_exits_with_config_code(tmp_path):
    filepath = tmp_path / "config.yaml"
    filepath.write_text("diffusion:\n  heads: 3\n")
    result = CliRunner().invoke(commandline, ["impute", "-C", str(filepath)])
    assert result.exit_code == int(enums.ExitCode.config)


def test_guidance_overrides_nest_given_options():
    overrides = guidance_overrides(seed=4, strategy="dropout", n_samples=None, stride=10, steps=25)
    assert overrides == {
        "seed": 4,
        "guidance": {"strategy": "dropout"},
        "evaluation": {"stride": 10},
        "diffusion": {"inference_steps": 25},
    }
