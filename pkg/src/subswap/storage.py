"""Manifest-plus-blob persistence helpers.

Every artifact directory holds a JSON ``manifest`` describing typed,
little-endian raw blobs stored beside it. Loading is fail-closed: manifests
are parsed and every referenced blob's existence, byte length, and checksum
are verified before any data is returned.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptionError, FormatVersionError, StorageError

MANIFEST_NAME = "manifest"

#: numpy dtype strings for the supported storage dtypes (little-endian).
_DTYPES = {"float32": "<f4", "float64": "<f8"}
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def dtype_name(dtype: torch.dtype) -> str:
    for name, td in _TORCH_DTYPES.items():
        if td == dtype:
            return name
    raise StorageError(f"unsupported storage dtype {dtype}")


def torch_dtype(name: str) -> torch.dtype:
    if name not in _TORCH_DTYPES:
        raise FormatVersionError(f"unsupported storage dtype {name!r}")
    return _TORCH_DTYPES[name]


def tensor_to_bytes(tensor: torch.Tensor) -> bytes:
    arr = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(arr).astype(_DTYPES[dtype_name(tensor.dtype)]).tobytes()


def tensor_from_bytes(data: bytes, dtype: str, shape: list[int]) -> torch.Tensor:
    arr = np.frombuffer(data, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return torch.from_numpy(arr)


def blob_entry(tensor: torch.Tensor, filename: str) -> dict:
    """Manifest entry describing one blob (shape, byte length, checksum)."""
    data = tensor_to_bytes(tensor)
    return {
        "file": filename,
        "shape": list(tensor.shape),
        "nbytes": len(data),
        "crc32": zlib.crc32(data),
    }


def write_blob(directory: Path, entry: dict, tensor: torch.Tensor) -> None:
    (directory / entry["file"]).write_bytes(tensor_to_bytes(tensor))


def read_blob(directory: Path, entry: dict, dtype: str) -> torch.Tensor:
    """Read and verify one blob against its manifest entry."""
    path = directory / entry["file"]
    if not path.is_file():
        raise CorruptionError(f"missing blob {entry['file']}")
    data = path.read_bytes()
    if len(data) != entry["nbytes"]:
        raise CorruptionError(
            f"blob {entry['file']} holds {len(data)} bytes, manifest says {entry['nbytes']}"
        )
    if zlib.crc32(data) != entry["crc32"]:
        raise CorruptionError(f"blob {entry['file']} fails its checksum")
    expected = int(np.prod(entry["shape"])) * int(_DTYPES[dtype][-1])
    if len(data) != expected:
        raise CorruptionError(
            f"blob {entry['file']} length {len(data)} does not match shape {entry['shape']}"
        )
    return tensor_from_bytes(data, dtype, entry["shape"])


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write a file via a temporary sibling and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise StorageError(f"failed to write {path}: {exc}") from exc


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


class ArtifactWriter:
    """Assemble an artifact directory in a staging area, then move it in place.

    The target directory only ever appears fully written; a pre-existing
    directory at the target path is replaced.
    """

    def __init__(self, target: Path):
        self.target = Path(target)
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self._staging = Path(
            tempfile.mkdtemp(dir=self.target.parent, prefix=f".{self.target.name}.")
        )

    @property
    def path(self) -> Path:
        return self._staging

    def commit(self) -> None:
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self._staging, self.target)

    def abort(self) -> None:
        shutil.rmtree(self._staging, ignore_errors=True)


def write_manifest(directory: Path, manifest: dict) -> None:
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (Path(directory) / MANIFEST_NAME).write_text(text, encoding="utf-8")


def read_manifest(directory: Path, expected_format: str, version: int) -> dict:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not directory.is_dir() or not path.is_file():
        raise CorruptionError(f"no manifest found under {directory}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable manifest under {directory}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CorruptionError(f"manifest under {directory} is not an object")
    if manifest.get("format") != expected_format:
        raise CorruptionError(
            f"expected a {expected_format!r} artifact, found {manifest.get('format')!r}"
        )
    if manifest.get("format_version") != version:
        raise FormatVersionError(
            f"unsupported {expected_format} format version {manifest.get('format_version')!r}"
        )
    return manifest
