"""
Module defining file system paths used by the toolkit.

This module contains the names of the artifacts every command writes into its
run directory and the location of the resources shipped with the package.

Constants
---------
RESOURCES_PATH : Path
    The directory holding the shipped vocabulary files and the default config.

VOCABULARY_FILE : Path
    The closed word vocabulary used by the prompt tokenizer.

ATTRIBUTE_VOCABULARY_FILE : Path
    The attribute -> candidate words map used to interpret pseudo-tokens.

DEFAULT_CONFIG_FILE : Path
    The YAML file holding every default of a run.

RUN_MANIFEST_FILE : str
    The filename of the per-command run manifest.

Functions
---------
stage_path : function
    Constructs the directory a command writes its artifacts into.
"""
import os

from pathlib import Path

RESOURCES_PATH = Path(__file__).parent.parent.parent / "resources"
VOCABULARY_FILE = RESOURCES_PATH / "vocabulary.json"
ATTRIBUTE_VOCABULARY_FILE = RESOURCES_PATH / "attribute_vocabulary.json"
DEFAULT_CONFIG_FILE = RESOURCES_PATH / "default_run_config.yaml"

RUN_MANIFEST_FILE = "run.json"
ENCODERS_CHECKPOINT = "encoders.ckpt"
INVERSION_CHECKPOINT = "inversion.ckpt"
GENERATOR_CHECKPOINT = "generator.ckpt"
INVERSION_LOG = "inversion.jsonl"
ATTACK_LOG = "attack.jsonl"
ATTACK_MANIFEST_FILE = "manifest.json"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
WORDCLOUD_CSV = "wordcloud.csv"
WORDCLOUD_JSON = "wordcloud.json"
ATTRIBUTE_MANIFEST_FILE = "attributes.json"

STAGE_DIRS = {
    "synth-gen": "synth",
    "train-inversion": "inversion",
    "train-attack": "attack",
    "attack": "adversarial",
    "evaluate": "evaluation",
    "interpret": "interpretation",
}


def stage_path(output_dir, command: str) -> str:
    """
    Constructs the directory a command writes its artifacts into.

    Parameters
    ----------
    output_dir : str
        The run output directory.
    command : str
        The CLI command name.

    Returns
    -------
    str
        The full path to the command's directory.
    """
    return os.path.join(output_dir, STAGE_DIRS[command])
