"""
Entrypoint for the CLI tool.

The ``ap-attack`` command runs the stages of the attack pipeline one at a
time; each stage writes into its own directory under the run's ``output_dir``:

- ``synth-gen``        render the synthetic attribute dataset
- ``train-inversion``  train the attribute inversion networks
- ``train-attack``     train the perturbation generator
- ``attack``           perturb a folder of images with a trained generator
- ``evaluate``         clean/adversarial retrieval across victims, aAP and mDR
- ``interpret``        rank attribute words for the learned pseudo-tokens

Every command reads ``--config FILE`` (YAML or TOML) merged over the shipped
defaults; any config value can be overridden with ``--section.key value``.

Notes
-----
- ``AP_ATTACK_NUM_THREADS`` (environment or ``.env``) fixes the number of torch
  threads; it defaults to 1 so repeated runs are bit-identical.
"""
import logging
import os
import platform
import sys

from datetime import datetime
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import torch
import typer

from dotenv import load_dotenv
from termcolor import colored

from ap_attack.applications.cli import pipeline
from ap_attack.core.errors import ApAttackError
from ap_attack.core.interpret import accuracy_table
from ap_attack.core.run_config import RunConfig

app = typer.Typer(
    context_settings={"help_option_names": ["-h", "--help"]}
)  # creates a CLI app

OVERRIDE_SETTINGS = {"allow_extra_args": True, "ignore_unknown_options": True}

T = TypeVar("T")

ConfigOption = typer.Option(
    None, "--config", "-c", help="YAML or TOML run config merged over the defaults."
)
VerboseOption = typer.Option(
    False, "--verbose", "-v", help="Enable verbose logging for debugging."
)


def load_env_if_needed():
    """
    Load a ``.env`` file from the working directory when the thread count is
    not set, then fix torch's intra-op thread count.
    """
    if os.getenv("AP_ATTACK_NUM_THREADS") is None:
        load_dotenv()
    if os.getenv("AP_ATTACK_NUM_THREADS") is None:
        load_dotenv(dotenv_path=os.path.join(os.getcwd(), ".env"))
    torch.set_num_threads(int(os.getenv("AP_ATTACK_NUM_THREADS", "1")))


def run_command(
    ctx: typer.Context,
    config_file: Optional[Path],
    verbose: bool,
    fn: Callable[[RunConfig], T],
) -> T:
    """
    Resolve the config (file + extra ``--key value`` args) and run `fn`.

    Toolkit errors become a single red diagnostic line and exit code 1;
    configuration is validated before any compute.
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
    load_env_if_needed()
    try:
        config = RunConfig.from_file(config_file, overrides=list(ctx.args))
        return fn(config)
    except ApAttackError as e:
        typer.echo(colored(f"Error: {e}", "red"), err=True)
        raise typer.Exit(code=1)


@app.command("synth-gen", context_settings=OVERRIDE_SETTINGS)
def synth_gen(
    ctx: typer.Context,
    config_file: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Render the synthetic attribute-labelled dataset."""
    manifest = run_command(ctx, config_file, verbose, pipeline.run_synth_gen)
    counts = ", ".join(f"{split} {len(names)}" for split, names in manifest.splits.items())
    print(colored("Generated synthetic dataset:", "green"), counts)


@app.command("train-inversion", context_settings=OVERRIDE_SETTINGS)
def train_inversion(
    ctx: typer.Context,
    config_file: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Train the attribute inversion networks (stage 1)."""
    losses = run_command(ctx, config_file, verbose, pipeline.run_train_inversion)
    if losses:
        print(colored("Inversion loss:", "green"), f"{losses[0]:.4f} -> {losses[-1]:.4f}")


@app.command("train-attack", context_settings=OVERRIDE_SETTINGS)
def train_attack(
    ctx: typer.Context,
    config_file: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Train the perturbation generator (stage 2)."""
    losses = run_command(ctx, config_file, verbose, pipeline.run_train_attack)
    if losses:
        print(colored("Attack loss:", "green"), f"{losses[0]:.4f} -> {losses[-1]:.4f}")


@app.command("attack", context_settings=OVERRIDE_SETTINGS)
def attack(
    ctx: typer.Context,
    input_dir: Path = typer.Argument(..., help="Folder of images to perturb."),
    config_file: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Write adversarial versions of every image in a folder."""
    manifest = run_command(ctx, config_file, verbose, lambda c: pipeline.run_attack(c, input_dir))
    worst = max(entry["max_abs_delta"] for entry in manifest["images"])
    print(
        colored("Perturbed images:", "green"),
        f"{len(manifest['images'])} (max |delta| {worst * 255:.1f}/255)",
    )


@app.command("evaluate", context_settings=OVERRIDE_SETTINGS)
def evaluate(
    ctx: typer.Context,
    config_file: Optional[Path] = ConfigOption,
    clean_only: bool = typer.Option(
        False, "--clean-only", help="Ignore any trained generator and report clean retrieval."
    ),
    verbose: bool = VerboseOption,
):
    """Retrieval mAP per victim, aAP and mDR."""
    report = run_command(
        ctx, config_file, verbose, lambda c: pipeline.run_evaluate(c, clean_only=clean_only)
    )
    print(report.to_table())


@app.command("interpret", context_settings=OVERRIDE_SETTINGS)
def interpret(
    ctx: typer.Context,
    config_file: Optional[Path] = ConfigOption,
    verbose: bool = VerboseOption,
):
    """Rank attribute words for the learned pseudo-tokens."""
    summary = run_command(ctx, config_file, verbose, pipeline.run_interpret)
    print(colored("Interpretation rows:", "green"), len(summary.rows))
    if summary.accuracy:
        print(accuracy_table(summary.accuracy))
    if summary.adversarial_accuracy:
        print(colored("Adversarial pseudo-tokens:", "yellow"))
        print(accuracy_table(summary.adversarial_accuracy))


def get_system_info():
    return {
        "os": platform.system(),
        "os_version": platform.version(),
        "architecture": platform.machine(),
        "python_version": sys.version,
        "packages": format_installed_packages(get_installed_packages()),
    }


REPORTED_PACKAGES = ("ap-attack", "torch", "numpy", "pillow", "typer", "dataclasses-json")


def get_installed_packages(names: Sequence[str] = REPORTED_PACKAGES):
    packages = {}
    for name in names:
        try:
            packages[name] = version(name)
        except PackageNotFoundError:
            packages[name] = "not installed"
    return packages


def format_installed_packages(packages):
    return "\n".join([f"{name}: {version}" for name, version in packages.items()])


@app.command("sysinfo")
def sysinfo():
    """Print system information for bug reports."""
    print(f"date: {datetime.now().isoformat()}")
    for key, value in get_system_info().items():
        print(f"{key}: {value}")


if __name__ == "__main__":
    app()
