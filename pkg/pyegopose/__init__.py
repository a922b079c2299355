"""Placeholder for packaging."""

import pathlib
import sys
from typing import Any, Callable, Dict

import click

from pyegopose.modules import enums
from pyegopose.modules.exceptions import PoseError

from .main import COMMANDS, start, version


def guidance_overrides(**kwargs) -> Dict[str, Any]:
    """Nested settings of the command line options that were given.

    Returns:
        Dict[str, Any]:
        Overrides keyed like ``EnvConfig``; options left unset are absent.
    """
    mapping = {
        "seed": ("seed",),
        "strategy": ("guidance", "strategy"),
        "uncertainty": ("guidance", "uncertainty"),
        "n_samples": ("guidance", "n_samples"),
        "invert_dropout": ("guidance", "invert_dropout"),
        "stride": ("evaluation", "stride"),
        "steps": ("diffusion", "inference_steps"),
    }
    overrides: Dict[str, Any] = {}
    for option, path in mapping.items():
        if (value := kwargs.get(option)) is None:
            continue
        section = overrides
        for key in path[:-1]:
            section = section.setdefault(key, {})
        section[path[-1]] = value
    return overrides


def shared_options(func: Callable) -> Callable:
    """Options accepted by every command."""
    options = [
        click.option(
            "--config", "-C", "env_file", type=click.Path(exists=True), help="Configuration or run manifest filepath."
        ),
        click.option("--seed", type=int, help="Global seed."),
        click.option("--out", "-O", type=click.Path(path_type=pathlib.Path), help="Output directory."),
        click.option(
            "--split",
            type=click.Choice([str(split) for split in enums.Split]),
            default=str(enums.Split.test),
            show_default=True,
            help="Dataset split consumed by the command.",
        ),
        click.option(
            "--strategy", type=click.Choice([str(item) for item in enums.Strategy]), help="Guidance strategy."
        ),
        click.option(
            "--uncertainty",
            type=click.Choice([str(item) for item in enums.UncertaintyKind]),
            help="Uncertainty kind handed to the guidance.",
        ),
        click.option("--n-samples", "n_samples", type=click.IntRange(min=1), help="Draws averaged per window."),
        click.option("--stride", type=click.IntRange(min=1), help="Sliding window stride."),
        click.option("--steps", type=click.IntRange(min=1), help="Inference diffusion steps."),
        click.option(
            "--invert-dropout",
            "invert_dropout",
            is_flag=True,
            default=None,
            help="Zero the most uncertain hand values first under dropout guidance.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def dispatch(command: str, **kwargs) -> None:
    """Runs a command and maps failures to their exit codes."""
    env_file = kwargs.pop("env_file", None)
    run_kwargs = {
        "split": enums.Split(kwargs.pop("split")),
        "out": kwargs.pop("out", None),
    }
    if mode := kwargs.pop("mode", None):
        run_kwargs["mode"] = enums.InputMode(mode)
    try:
        manifest = start(command, env_file=env_file, overrides=guidance_overrides(**kwargs), **run_kwargs)
    except PoseError as error:
        click.secho(f"\n{type(error).__name__}: {error.detail}", fg="red")
        sys.exit(int(error.exit_code))
    click.echo(f"Run manifest: {manifest}")
    sys.exit(int(enums.ExitCode.success))


@click.group(invoke_without_command=True, context_settings={"help_option_names": ["--help", "-H"]})
@click.option("--version", "-V", is_flag=True, help="Prints the version.")
@click.pass_context
def commandline(ctx: click.Context, **kwargs) -> None:
    """Starter function to invoke PyEgoPose via CLI commands.

    **Flags**
        - ``--version | -V``: Prints the version.
        - ``--help | -H``: Prints the help section.

    **Commands**
        ``gen-data``: Generates the synthetic train, val and test splits.
        ``train-mae``: Trains the hand imputer ensemble.
        ``train-vqvae``: Trains the motion tokenizer.
        ``train-diffusion``: Trains the discrete diffusion denoiser.
        ``impute``: Imputes the hands of a split.
        ``generate``: Generates full-body motion of a split.
        ``evaluate``: Writes the evaluation report of a split.
        ``plot``: Plots the imputed hands of a split.
    """
    if kwargs.get("version"):
        click.echo(f"PyEgoPose {version.__version__}")
        sys.exit(0)
    if ctx.invoked_subcommand is None:
        click.secho("\nNo command provided", fg="red")
        click.echo(ctx.get_help())
        sys.exit(1)


def register(name: str) -> None:
    """Adds a pipeline command to the group."""

    @shared_options
    def command(**kwargs) -> None:
        dispatch(name, **kwargs)

    command.__doc__ = COMMANDS[name].__doc__
    if name == "generate":
        command = click.option(
            "--mode",
            type=click.Choice([str(mode) for mode in enums.InputMode]),
            default=str(enums.InputMode.doubly_sparse),
            show_default=True,
            help="Input regime.",
        )(command)
    commandline.command(name=name)(command)


for _name in COMMANDS:
    register(_name)
