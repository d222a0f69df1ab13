"""
Functions for reading, validating and digesting the run configuration.

A run is configured by a YAML (or TOML) file merged over the shipped
``default_run_config.yaml``; individual values can be overridden from the
command line with dotted keys such as ``--stage2.epsilon 0.0314``.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union, get_type_hints

import tomlkit
import yaml

from dataclasses_json import dataclass_json
from tomlkit.exceptions import ParseError as TOMLParseError

from ap_attack.core.attack import AttackConfig
from ap_attack.core.default.constants import DEFAULT_TEMPLATE
from ap_attack.core.default.paths import (
    ATTRIBUTE_VOCABULARY_FILE,
    DEFAULT_CONFIG_FILE,
    VOCABULARY_FILE,
)
from ap_attack.core.defenses import parse_defense_chain
from ap_attack.core.encoders import JointSpaceConfig
from ap_attack.core.errors import ApAttackError, ConfigError
from ap_attack.core.inversion import InversionConfig
from ap_attack.data.synthdata import SyntheticSpec

logger = logging.getLogger(__name__)

# keys left out of the digest; they locate a run but do not change its results
DIGEST_EXCLUDED_KEYS = ("output_dir",)


@dataclass_json
@dataclass
class EncoderSection:
    """`grounded` builds reference encoders that read the synthetic palette."""

    seed: int = 0
    checkpoint: Optional[str] = None
    grounded: bool = True


@dataclass_json
@dataclass
class DataSection:
    """`root` holds train/query/gallery folders; empty means the run's synth directory."""

    root: str = ""
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass_json
@dataclass
class EvaluationSection:
    victims: List[str] = field(
        default_factory=lambda: ["handcrafted:0", "handcrafted:1", "clip-visual"]
    )
    surrogate: str = "handcrafted:0"
    defenses: List[str] = field(default_factory=list)
    attack_gallery: bool = False
    distance: str = "cosine"
    exclude_same_camera: bool = True
    generator: Optional[str] = None


@dataclass_json
@dataclass
class InterpretationSection:
    top_k: int = 2
    split: str = "query"
    adversarial: bool = True


@dataclass_json
@dataclass
class RunConfig:
    """Every setting of a run; see ``resources/default_run_config.yaml``."""

    seed: int = 0
    output_dir: str = "runs/default"
    template: str = DEFAULT_TEMPLATE
    attribute_names: Optional[List[str]] = None
    vocabulary: str = ""
    attribute_vocabulary: str = ""
    joint_space: JointSpaceConfig = field(default_factory=JointSpaceConfig)
    encoders: EncoderSection = field(default_factory=EncoderSection)
    data: DataSection = field(default_factory=DataSection)
    stage1: InversionConfig = field(default_factory=InversionConfig)
    stage2: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    interpretation: InterpretationSection = field(default_factory=InterpretationSection)

    @classmethod
    def from_file(
        cls, config_file: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
    ) -> "RunConfig":
        """
        Load the defaults, merge a user file and then the overrides over them.

        Raises
        ------
        ConfigError
            On unreadable files, unknown keys (named by their dotted path) or
            invalid values.
        """
        merged = read_config_file(DEFAULT_CONFIG_FILE)
        if config_file is not None:
            user = read_config_file(Path(config_file))
            check_keys(user, cls)
            merged = deep_merge(merged, user)
        override_dict = parse_overrides(overrides)
        check_keys(override_dict, cls)
        merged = deep_merge(merged, override_dict)
        check_keys(merged, cls)
        try:
            return cls.from_dict(merged).validate()
        except ApAttackError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"Invalid configuration value: {e}")

    def validate(self) -> "RunConfig":
        self.joint_space.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.data.synthetic.validate()
        if tuple(self.data.synthetic.image_size) != tuple(self.joint_space.image_size):
            raise ConfigError(
                f"data.synthetic.image_size {list(self.data.synthetic.image_size)} differs "
                f"from joint_space.image_size {list(self.joint_space.image_size)}"
            )
        for key, path in (
            ("vocabulary", self.vocabulary_path),
            ("attribute_vocabulary", self.attribute_vocabulary_path),
        ):
            if not path.is_file():
                raise ConfigError(f"{key} file '{path}' does not exist")
        if not self.evaluation.victims:
            raise ConfigError("evaluation.victims must name at least one victim")
        parse_defense_chain(self.evaluation.defenses, self.seed)
        if self.evaluation.distance not in ("cosine", "l2"):
            raise ConfigError(f"evaluation.distance must be cosine or l2, got '{self.evaluation.distance}'")
        if self.interpretation.top_k < 1:
            raise ConfigError("interpretation.top_k must be at least 1")
        if self.interpretation.split not in ("train", "query", "gallery"):
            raise ConfigError("interpretation.split must be train, query or gallery")
        return self

    @property
    def vocabulary_path(self) -> Path:
        # empty means the vocabulary shipped with the package
        return Path(self.vocabulary) if self.vocabulary else VOCABULARY_FILE

    @property
    def attribute_vocabulary_path(self) -> Path:
        return Path(self.attribute_vocabulary) if self.attribute_vocabulary else ATTRIBUTE_VOCABULARY_FILE

    def digest(self) -> str:
        return config_digest(self)


def read_config_file(config_file: Path) -> Dict[str, Any]:
    """Plain dict of a YAML or TOML config file."""
    config_file = Path(config_file)
    if not config_file.is_file():
        raise ConfigError(f"Config file '{config_file}' does not exist")
    text = config_file.read_text(encoding="utf-8")
    try:
        if config_file.suffix == ".toml":
            data = tomlkit.parse(text).unwrap()
        else:
            data = yaml.safe_load(text)
    except (yaml.YAMLError, TOMLParseError) as e:
        raise ConfigError(f"Cannot parse config file '{config_file}': {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{config_file}' must hold a mapping at top level")
    return data


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _dataclass_type(annotation) -> Optional[type]:
    if dataclasses.is_dataclass(annotation):
        return annotation
    for arg in getattr(annotation, "__args__", ()) or ():
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def check_keys(data: Mapping[str, Any], cls: type, prefix: str = "") -> None:
    """Raise ConfigError naming the first key that `cls` does not declare."""
    hints = get_type_hints(cls)
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in hints:
            raise ConfigError(f"Unknown config key '{dotted}'")
        nested = _dataclass_type(hints[key])
        if nested is not None and isinstance(value, Mapping):
            check_keys(value, nested, prefix=f"{dotted}.")


def parse_overrides(overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Nested dict of ``--a.b value`` pairs; values are parsed as YAML scalars.

    Raises
    ------
    ConfigError
        If a flag lacks its value or does not start with ``--``.
    """
    result: Dict[str, Any] = {}
    items = list(overrides)
    if len(items) % 2:
        raise ConfigError(f"Override '{items[-1]}' has no value")
    for flag, raw in zip(items[::2], items[1::2]):
        if not flag.startswith("--") or len(flag) <= 2:
            raise ConfigError(f"Expected an override flag like --stage2.epsilon, got '{flag}'")
        keys = flag[2:].replace("-", "_").split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value '{raw}' of {flag}: {e}")
        node = result
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return result


def _canonical(config: RunConfig) -> Dict[str, Any]:
    data = config.to_dict(encode_json=True)
    for key in DIGEST_EXCLUDED_KEYS:
        data.pop(key, None)
    return data


def config_digest(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON of the resolved config."""
    canonical = json.dumps(_canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
