"""
Run Store Module
================

This module provides a file-backed store over one command's run
directory, where keys are relative file names and values are file contents.
Commands write their reports, manifests and JSON-lines training logs through
it, and finish by writing ``run.json``.

Classes
-------
RunStore
    A write-only file store rooted at a run directory.
RunManifest
    The contents of ``run.json``.
"""
from __future__ import annotations

import json

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Union

from dataclasses_json import dataclass_json

from ap_attack.core.default.paths import RUN_MANIFEST_FILE
from ap_attack.core.version import __version__


@dataclass_json
@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    started_at: str
    wall_time_seconds: float
    version: str = __version__


class RunStore:
    """
    A file-based key-value store where keys correspond to file names under a
    run directory and values to file contents.

    Attributes
    ----------
    path : Path
        The run directory; created if missing.
    """

    def __init__(self, path: Union[str, Path]):
        self.path: Path = Path(path).absolute()
        self.path.mkdir(parents=True, exist_ok=True)

    def _resolve(self, key: Union[str, Path]) -> Path:
        if str(key).startswith("../") or Path(key).is_absolute():
            raise ValueError(f"File name {key} attempted to leave the run directory.")
        return self.path / key

    def __setitem__(self, key: Union[str, Path], val: str) -> None:
        if not isinstance(val, str):
            raise TypeError("val must be str")
        full_path = self._resolve(key)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        full_path.write_text(val, encoding="utf-8")

    def file_path(self, key: Union[str, Path]) -> Path:
        """Absolute path of `key`, with its parent directory created."""
        full_path = self._resolve(key)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        return full_path

    def set_json(self, key: Union[str, Path], value: Any) -> None:
        self[key] = json.dumps(value, indent=2, sort_keys=True) + "\n"

    def log(self, key: Union[str, Path], record: Any) -> None:
        """
        Append one JSON line to ``logs/<key>``.

        `record` is a dict or a dataclass_json object.
        """
        if hasattr(record, "to_dict"):
            record = record.to_dict()
        full_path = self._resolve(Path("logs") / key)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        with open(full_path, "a", encoding="utf-8") as file:
            file.write(json.dumps(record, sort_keys=True) + "\n")

    def reset_log(self, key: Union[str, Path]) -> None:
        log_path = self.path / "logs" / key
        if log_path.exists():
            log_path.unlink()

    def write_manifest(
        self, command: str, config_digest: str, seed: int, started: datetime
    ) -> RunManifest:
        """Write ``run.json`` for a command that started at `started`."""
        now = datetime.now(timezone.utc)
        manifest = RunManifest(
            command=command,
            config_digest=config_digest,
            seed=seed,
            started_at=started.isoformat(),
            wall_time_seconds=(now - started).total_seconds(),
        )
        self.set_json(RUN_MANIFEST_FILE, manifest.to_dict())
        return manifest
