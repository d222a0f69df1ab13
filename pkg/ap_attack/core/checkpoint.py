"""
Checkpoint container format.

A checkpoint is a zip archive holding ``manifest.json`` and one raw
little-endian float32 blob per named array under ``arrays/``. The manifest
records, for every array, its name, shape, byte offset within the logical
concatenation of all blobs and byte length, plus the format version, the
config digest of the run that produced it, a content digest and free-form
metadata.

Archives are written with fixed timestamps and sorted entries, so saving the
same arrays twice yields bit-identical files.

Functions
---------
save_checkpoint : function
    Writes named arrays (numpy arrays or torch tensors) to a container.

load_checkpoint : function
    Reads a container back, validating version and blob sizes.

module_arrays / load_module_arrays : function
    Bridge between `torch.nn.Module` state and named arrays.

weights_checksum : function
    SHA-256 over a module's state, used for freeze contracts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zipfile

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np
import torch

from ap_attack.core.default.constants import CHECKPOINT_FORMAT_VERSION
from ap_attack.core.errors import CheckpointError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
ARRAY_PREFIX = "arrays/"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class Checkpoint:
    """Arrays and manifest read back from a container."""

    arrays: Dict[str, np.ndarray]
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.manifest.get("metadata", {})

    @property
    def config_digest(self) -> str:
        return self.manifest.get("config_digest", "")


def _as_float32(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def content_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over (name, shape, bytes) of every array in name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = _as_float32(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(json.dumps(list(arr.shape)).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def _write_entry(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, data)


def save_checkpoint(
    arrays: Mapping[str, ArrayLike],
    path: Union[str, Path],
    config_digest: str = "",
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """
    Write named arrays to a checkpoint container.

    Parameters
    ----------
    arrays : Mapping[str, ArrayLike]
        Arrays to store. Values are converted to little-endian float32.
    path : str or Path
        Destination file; parent directories are created.
    config_digest : str
        Digest of the config that produced the arrays.
    metadata : Mapping, optional
        JSON-serializable extra information (architecture, config sections).

    Returns
    -------
    Path
        The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    converted = {name: _as_float32(value) for name, value in arrays.items()}

    entries = []
    offset = 0
    for name in sorted(converted):
        arr = converted[name]
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "<f4",
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_digest": config_digest,
        "content_digest": content_digest(converted),
        "arrays": entries,
        "metadata": dict(metadata or {}),
    }

    with zipfile.ZipFile(path, "w") as archive:
        _write_entry(
            archive,
            MANIFEST_NAME,
            json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
        )
        for entry in entries:
            _write_entry(
                archive,
                ARRAY_PREFIX + entry["name"],
                converted[entry["name"]].tobytes(),
            )
    logger.debug(f"Saved {len(entries)} arrays to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint container.

    Raises
    ------
    CheckpointError
        If the file is missing or not a container, the version differs, an
        array blob is missing, or a blob's length disagrees with its shape.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint '{path}' does not exist")
    try:
        archive = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as e:
        raise CheckpointError(f"Checkpoint '{path}' is not a valid container: {e}")

    with archive:
        names = set(archive.namelist())
        if MANIFEST_NAME not in names:
            raise CheckpointError(f"Checkpoint '{path}' has no {MANIFEST_NAME}")
        manifest = json.loads(archive.read(MANIFEST_NAME).decode("utf-8"))

        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"Checkpoint '{path}' has format version {version}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )

        arrays: Dict[str, np.ndarray] = {}
        for entry in manifest.get("arrays", []):
            name = entry["name"]
            shape = tuple(entry["shape"])
            blob_name = ARRAY_PREFIX + name
            if blob_name not in names:
                raise CheckpointError(f"Array '{name}' is missing from '{path}'")
            blob = archive.read(blob_name)
            expected = int(np.prod(shape, dtype=np.int64)) * 4
            if len(blob) != expected or entry.get("nbytes", expected) != expected:
                raise CheckpointError(
                    f"Array '{name}' has {len(blob)} bytes, expected {expected} "
                    f"for shape {list(shape)}"
                )
            arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()

    return Checkpoint(arrays=arrays, manifest=manifest)


def module_arrays(module: torch.nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    """Named float32 arrays for every parameter and buffer of a module."""
    return {
        f"{prefix}{name}": _as_float32(tensor)
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(
    module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = ""
) -> None:
    """
    Copy named arrays into a module's state.

    Raises
    ------
    CheckpointError
        Naming the first state entry missing from `arrays` or with a wrong shape.
    """
    state = module.state_dict()
    new_state = {}
    for name, tensor in state.items():
        key = f"{prefix}{name}"
        if key not in arrays:
            raise CheckpointError(f"Array '{key}' is missing from the checkpoint")
        value = arrays[key]
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Array '{key}' has shape {list(value.shape)}, "
                f"expected {list(tensor.shape)}"
            )
        new_state[name] = torch.from_numpy(np.array(value)).to(tensor.dtype)
    module.load_state_dict(new_state)


def weights_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every state entry of a module, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
