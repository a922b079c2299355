import json
import logging
import logging.config
import os
import pathlib
import random
from datetime import timedelta
from typing import Any, Dict

import numpy as np
import torch
import yaml

from pyegopose import version
from pyegopose.executors import squire
from pyegopose.modules import digests, enums, models, payloads
from pyegopose.modules.exceptions import ConfigError

LOGGER = logging.getLogger("pyegopose")
DEFAULT_FORMAT = "%(asctime)s %(levelname)-8s [%(module)s:%(lineno)d] - %(message)s"
DEFAULT_DATEFMT = "%b-%d-%Y %I:%M:%S %p"


def default_log_config() -> Dict[str, Any]:
    """Console logging for the ``pyegopose`` logger."""
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"default": {"format": DEFAULT_FORMAT, "datefmt": DEFAULT_DATEFMT}},
        "handlers": {
            "default": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "stream": "ext://sys.stderr",
            }
        },
        "loggers": {"pyegopose": {"handlers": ["default"], "level": "INFO", "propagate": False}},
    }


def configure_logging(log_config: Dict[str, Any] | str | os.PathLike | None) -> None:
    """Installs a logging configuration.

    Args:
        log_config: Logging configuration as a dict or a FilePath. Supports .yaml/.yml, .json or .ini formats.

    Raises:
        ConfigError:
        If the file format is not supported.
    """
    if not log_config:
        logging.config.dictConfig(default_log_config())
        return
    if isinstance(log_config, dict):
        logging.config.dictConfig(log_config)
        return
    filepath = pathlib.Path(log_config)
    if filepath.suffix.lower() == ".ini":
        logging.config.fileConfig(filepath, disable_existing_loggers=False)
    elif filepath.suffix.lower() in (".yaml", ".yml"):
        with open(filepath) as stream:
            logging.config.dictConfig(yaml.load(stream, yaml.FullLoader))
    elif filepath.suffix.lower() == ".json":
        with open(filepath) as stream:
            logging.config.dictConfig(json.load(stream))
    else:
        raise ConfigError(
            f"\n\tUnsupported format for 'log_config' {str(filepath)!r}, can be one of (.yaml, .yml, .json, .ini)"
        )


def set_deterministic(env: models.EnvConfig) -> None:
    """Seeds every random source and enables the deterministic numeric mode when requested."""
    random.seed(env.seed)
    np.random.seed(env.seed % 2**32)
    torch.manual_seed(env.seed)
    torch.set_num_threads(env.threads)
    if env.deterministic:
        # cuBLAS reads this before its first handle is created
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    LOGGER.debug("Seeded with %d, deterministic=%s, threads=%d", env.seed, env.deterministic, env.threads)


def initialize(**kwargs) -> models.EnvConfig:
    """Loads the effective configuration, then sets up logging and the random sources.

    Keyword Args:
        env_file: Configuration filepath, a previous run manifest included.
        Any other key overrides the corresponding top-level setting.

    Returns:
        EnvConfig:
        Effective configuration.
    """
    env = squire.load_env(**kwargs)
    configure_logging(env.log_config)
    set_deterministic(env)
    return env


def effective_config(env: models.EnvConfig) -> Dict[str, Any]:
    """JSON form of the effective configuration."""
    return env.model_dump(mode="json")


def write_run_manifest(
    directory: pathlib.Path,
    command: str,
    env: models.EnvConfig,
    elapsed: timedelta,
    checkpoints: Dict[str, str] | None = None,
    metrics: Dict[str, float] | None = None,
) -> pathlib.Path:
    """Writes the record needed to reproduce a command.

    Args:
        directory: Output directory of the command.
        command: Command name.
        env: Effective configuration.
        elapsed: Wall time of the command.
        checkpoints: Digests of the checkpoints read or written.
        metrics: Headline values produced by the command.

    Returns:
        pathlib.Path:
        Path of the manifest.
    """
    config = effective_config(env)
    manifest = payloads.RunManifest(
        command=command,
        version=version.__version__,
        config=config,
        config_hash=digests.calculate_hash(config),
        seeds={
            "global": env.seed,
            "imputer": env.imputer.seed,
            "tokenizer": env.tokenizer.seed,
            "diffusion": env.diffusion.seed,
        },
        checkpoints=checkpoints or {},
        host=squire.host_summary(),
        metrics=metrics or {},
        elapsed=squire.format_timedelta(elapsed),
    )
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    filepath = directory / enums.Artifacts.run_manifest
    with open(filepath, "w") as file:
        json.dump(manifest.model_dump(mode="json"), file, indent=2, sort_keys=True)
        file.write("\n")
    LOGGER.info("Run manifest written to %s", filepath)
    return filepath
