import json
import logging
import math
import os
import pathlib
import platform
from datetime import timedelta
from typing import Any, Dict

import psutil
import torch
import yaml
from pydantic import ValidationError

from pyegopose.modules import enums, models, payloads
from pyegopose.modules.exceptions import ConfigError

LOGGER = logging.getLogger("pyegopose")


def format_nos(input_: float) -> int | float:
    """Removes ``.0`` float values.

    Args:
        input_: Strings or integers with ``.0`` at the end.

    Returns:
        int | float:
        Int if found, else returns the received float value.
    """
    return int(input_) if isinstance(input_, float) and input_.is_integer() else input_


def format_timedelta(td: timedelta) -> str:
    """Converts timedelta to human-readable format by constructing a formatted string based on non-zero values.

    Args:
        td: Timedelta object.

    See Also:
        Always limits the output to a maximum of two identifiers.

    Examples:
        - 3 days and 1 hour
        - 1 hour and 11 minutes
        - 5 minutes and 23 seconds

    Returns:
        str:
        Human-readable format of timedelta.
    """
    days = td.days
    hours, remainder = divmod(td.seconds, 3600)
    minutes, seconds = divmod(remainder, 60)
    parts = []
    if days > 0:
        parts.append(f"{days} day{'s' if days > 1 else ''}")
    if hours > 0:
        parts.append(f"{hours} hour{'s' if hours > 1 else ''}")
    if minutes > 0:
        parts.append(f"{minutes} minute{'s' if minutes > 1 else ''}")
    if seconds > 0:
        parts.append(f"{seconds} second{'s' if seconds > 1 else ''}")
    return " and ".join(parts[:2]) or "less than a second"


def size_converter(byte_size: int | float) -> str:
    """Converts a byte count to human friendly format.

    Args:
        byte_size: Receives byte size as argument.

    Returns:
        str:
        Converted human-readable size.
    """
    if byte_size:
        size_name = ("B", "KB", "MB", "GB", "TB", "PB", "EB", "ZB", "YB")
        index = int(math.floor(math.log(byte_size, 1024)))
        return f"{format_nos(round(byte_size / pow(1024, index), 2))} {size_name[index]}"
    return "0 B"


def _read_mapping(env_file: pathlib.Path) -> Dict[str, Any]:
    """Loads a JSON or YAML mapping; a run manifest contributes its ``config`` section."""
    with open(env_file) as stream:
        if env_file.suffix.lower() == ".json":
            env_data = json.load(stream)
        else:
            env_data = yaml.load(stream, yaml.FullLoader)
    if not isinstance(env_data, dict):
        raise ConfigError(f"{env_file} does not hold a mapping")
    if "config" in env_data and "config_hash" in env_data:
        LOGGER.info("Replaying the configuration recorded in %s", env_file)
        env_data = env_data["config"]
    return {k.lower(): v for k, v in env_data.items()}


def envfile_loader(filename: str | os.PathLike) -> Dict[str, Any]:
    """Loads settings based on filetypes.

    Args:
        filename: Filename from where the settings have to be loaded.

    Returns:
        Dict[str, Any]:
        Settings found in the file, nested sections kept as mappings.

    Raises:
        ConfigError:
        If the file is missing, its format is not supported or its values are invalid.
    """
    env_file = pathlib.Path(filename)
    if not env_file.is_file():
        raise ConfigError(f"configuration file {str(env_file)!r} does not exist")
    if env_file.suffix.lower() in (".json", ".yaml", ".yml"):
        return _read_mapping(env_file)
    elif not env_file.suffix or env_file.suffix.lower() in (".text", ".txt", ".env"):
        try:
            return models.EnvConfig.from_env_file(env_file).model_dump(mode="json", exclude_unset=True)
        except ValidationError as error:
            raise ConfigError(str(error))
    else:
        raise ConfigError(
            "\n\tUnsupported format for 'env_file', can be one of (.json, .yaml, .yml, .txt, .text, .env or null)"
        )


def merge_settings(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merges two settings mappings, giving priority to ``override``."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_settings(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_env(**kwargs) -> models.EnvConfig:
    """Merge settings from env_file with kwargs, giving priority to kwargs.

    See Also:
        - This function allows settings to be loaded partially from files and partially through kwargs.
        - Nested sections merge key by key, so an override of ``diffusion.steps`` keeps the other diffusion keys.
        - ``None`` valued kwargs are ignored, which lets unset command line options fall through.

    Returns:
        EnvConfig:
        Returns a reference to the ``EnvConfig`` object.

    Raises:
        ConfigError:
        If the merged settings do not validate.
    """
    env_file = kwargs.pop("env_file", None)
    if env_file:
        file_env = envfile_loader(env_file)
    elif os.path.isfile(".env"):
        file_env = envfile_loader(".env")
    else:
        file_env = {}
    overrides = {key: value for key, value in kwargs.items() if value is not None}
    try:
        return models.EnvConfig(**merge_settings(file_env, overrides))
    except ValidationError as error:
        raise ConfigError(str(error))


def host_summary() -> payloads.HostSummary:
    """Describes the host a run executes on."""
    return payloads.HostSummary(
        platform=platform.platform(),
        python=platform.python_version(),
        cpu_count=psutil.cpu_count(logical=True) or 1,
        memory_total=size_converter(psutil.virtual_memory().total),
        torch=torch.__version__,
    )


def artifact_path(env: models.EnvConfig, *parts: str) -> pathlib.Path:
    """Path of an artifact under the workspace."""
    return pathlib.Path(env.workspace).joinpath(*parts)


def checkpoint_path(env: models.EnvConfig, name: enums.Artifacts) -> pathlib.Path:
    """Directory of a model checkpoint under the workspace."""
    return artifact_path(env, enums.Artifacts.checkpoints, name)
