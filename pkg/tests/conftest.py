import pathlib

import numpy as np
import pytest
import yaml

from pyegopose.features import synthesis
from pyegopose.modules import enums, models

WINDOW = 8
FRAMES = 32


def tiny_settings(workspace: pathlib.Path) -> dict:
    """Smallest configuration that runs every command end to end on a CPU in seconds."""
    return {
        "seed": 7,
        "workspace": str(workspace),
        "progress": False,
        "threads": 1,
        "data": {
            "generator": {"frames": FRAMES, "raise_rate_hz": 0.5},
            "split_sizes": {"train": 3, "val": 1, "test": 2},
            "noise_sigma_m": 0.02,
        },
        "imputer": {
            "window": WINDOW,
            "d_model": 16,
            "heads": 2,
            "encoder_layers": 1,
            "decoder_layers": 1,
            "ff_mult": 2,
            "members": 2,
            "epochs": 1,
            "batch_size": 8,
        },
        "tokenizer": {
            "window": WINDOW,
            "codebook_size": 8,
            "code_dim": 16,
            "hidden": 16,
            "depth": 1,
            "epochs": 1,
            "batch_size": 8,
        },
        "diffusion": {
            "steps": 4,
            "d_model": 16,
            "heads": 2,
            "layers": 1,
            "ff_mult": 2,
            "epochs": 1,
            "batch_size": 8,
        },
        "evaluation": {"stride": 4, "bootstrap_resamples": 50},
    }


@pytest.fixture
def tiny_env(tmp_path) -> models.EnvConfig:
    """Effective configuration writing into a temporary workspace."""
    return models.EnvConfig(**tiny_settings(tmp_path / "workspace"))


@pytest.fixture(scope="session")
def skeleton():
    """Default synthetic humanoid."""
    return synthesis.build_skeleton()


@pytest.fixture(scope="session")
def motion():
    """Short walking sequence with a hand raise."""
    config = models.GeneratorConfig(frames=FRAMES, raise_rate_hz=0.5)
    return synthesis.generate_motion(config, seed=3)


@pytest.fixture(scope="session")
def data_config() -> models.DataConfig:
    """Small gaussian-detector dataset settings."""
    return models.DataConfig(
        generator=models.GeneratorConfig(frames=FRAMES, raise_rate_hz=0.5),
        split_sizes={enums.Split.train: 3, enums.Split.val: 1, enums.Split.test: 2},
        noise_sigma_m=0.02,
    )


@pytest.fixture(scope="session")
def test_split(data_config):
    """Generated test split."""
    return synthesis.generate_split(data_config, enums.Split.test, data_config.seeds(enums.Split.test))


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random source."""
    return np.random.default_rng(11)


@pytest.fixture
def config_file(tmp_path) -> pathlib.Path:
    """YAML configuration of the tiny settings with its workspace under ``tmp_path``."""
    filepath = tmp_path / "config.yaml"
    filepath.write_text(yaml.dump(tiny_settings(tmp_path / "workspace")))
    return filepath
