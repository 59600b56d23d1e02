"""Binary field payloads, run manifests, and atomic CSV output.

Payload layout (little endian):

    bytes 0:4   magic  b"FVF1"
    bytes 4:20  header u32 x 4  (format version, d, n, components)
    bytes 20:   cell values, float64, lexicographic cell order with the
                components of one cell stored contiguously

Manifests are JSON files listing the run configuration alongside a
sha256 checksum per payload; payloads are written first and the manifest
last (atomically), so an interrupted run never leaves a manifest whose
checksums pass.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FVF1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4I")

MANIFEST_NAME = "manifest.json"
MANIFEST_KEYS = (
    "format_version", "experiment", "n", "dt_factor", "epsilon", "gamma", "a",
    "mu", "lambda", "T", "seed", "realisation", "sample_ids", "failed_ids",
    "payload_checksums",
)


class StorageError(RuntimeError):
    """Base class for persistence failures."""


class VersionMismatch(StorageError):
    pass


class TruncatedPayload(StorageError):
    pass


class ChecksumMismatch(StorageError):
    pass


class MeshMismatch(StorageError):
    pass


def write_payload(path: str | Path, values: np.ndarray, d: int, n: int) -> None:
    """Write one field payload; ``values`` is (cells,) or (cells, components)."""
    arr = np.asarray(values, dtype="<f8")
    if arr.ndim == 1:
        arr = arr[:, None]
    cells, comps = arr.shape
    if cells != n**d:
        raise StorageError(f"value count {cells} does not match n={n}, d={d}")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(FORMAT_VERSION, d, n, comps))
        fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_payload(path: str | Path) -> tuple[np.ndarray, int, int]:
    """Read one payload, returning (values (cells, comps), d, n)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + _HEADER.size:
        raise TruncatedPayload(f"{path}: file shorter than header")
    if raw[:4] != MAGIC:
        raise StorageError(f"{path}: bad magic {raw[:4]!r}")
    version, d, n, comps = _HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = 4 + _HEADER.size + n**d * comps * 8
    if len(raw) != expected:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f8", offset=4 + _HEADER.size)
    return values.reshape(n**d, comps).copy(), d, n


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory: str | Path, manifest: dict) -> None:
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise StorageError(f"manifest is missing keys {missing}")
    directory = Path(directory)
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, directory / MANIFEST_NAME)


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise StorageError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: manifest format version {manifest.get('format_version')}"
        )
    return manifest


def verify_payload(directory: str | Path, name: str, manifest: dict) -> Path:
    """Check one payload's checksum against the manifest; return its path."""
    directory = Path(directory)
    path = directory / name
    checks = manifest["payload_checksums"]
    if name not in checks:
        raise ChecksumMismatch(f"{name}: not listed in manifest")
    if not path.exists():
        raise StorageError(f"{path}: payload missing")
    actual = sha256_file(path)
    if actual != checks[name]:
        raise ChecksumMismatch(f"{name}: checksum {actual[:12]}... does not match manifest")
    return path


def write_csv_atomic(path: str | Path, header: str, rows: list[str]) -> None:
    """Write a CSV in one atomic replace; partial files are never visible."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join([header, *rows]) + "\n")
    os.replace(tmp, path)
