import logging

import pytest
import torch

from pyegopose import startup
from pyegopose.modules.exceptions import ConfigError


def test_configure_logging_rejects_unknown_formats(tmp_path):
    filepath = tmp_path / "logging.toml"
    filepath.write_text("")
    with pytest.raises(ConfigError):
        startup.configure_logging(filepath)


def test_configure_logging_from_yaml(tmp_path):
    filepath = tmp_path / "logging.yaml"
    filepath.write_text(
        "version: 1\n"
        "disable_existing_loggers: false\n"
        "loggers:\n"
        "  pyegopose:\n"
        "    level: WARNING\n"
    )
    startup.configure_logging(filepath)
    assert logging.getLogger("pyegopose").level == logging.WARNING
    startup.configure_logging(None)
    assert logging.getLogger("pyegopose").level == logging.INFO


def test_initialize_seeds_torch(tmp_path):
    env = startup.initialize(seed=21, workspace=str(tmp_path), deterministic=False, threads=1)
    first = torch.rand(3)
    startup.set_deterministic(env)
    assert torch.equal(first, torch.rand(3))
