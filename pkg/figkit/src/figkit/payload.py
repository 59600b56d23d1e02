"""Readers for the solver's on-disk formats.

Field payloads ("FVF1"): 4 magic bytes, four little-endian u32 header
words (format version, d, n, components), then float64 cell values in
lexicographic order, components of one cell contiguous.

When a ``manifest.json`` sits next to a payload, the payload must be
listed there and its sha256 must match; corrupt or truncated data is
never rendered.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FVF1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4I")
MANIFEST_NAME = "manifest.json"

CSV_HEADER = "experiment,field,metric,p,N,M,S,value"


class PayloadError(RuntimeError):
    """Unreadable, corrupt, or mismatching payload."""


class CsvError(RuntimeError):
    """Malformed metrics CSV."""


@dataclass(frozen=True)
class FieldPayload:
    d: int
    n: int
    values: np.ndarray  # (cells, components)

    @property
    def components(self) -> int:
        return self.values.shape[1]

    def grids(self) -> list[np.ndarray]:
        """Per-component (n, n) grids in lexicographic cell order (d=2)."""
        if self.d != 2:
            raise PayloadError(f"only 2-D payloads can be gridded, got d={self.d}")
        return [self.values[:, c].reshape(self.n, self.n) for c in range(self.components)]


def read_payload(path: str | Path) -> FieldPayload:
    path = Path(path)
    if not path.exists():
        raise PayloadError(f"{path}: no such payload")
    _verify_checksum(path)
    raw = path.read_bytes()
    if len(raw) < 4 + _HEADER.size:
        raise PayloadError(f"{path}: truncated (shorter than the header)")
    if raw[:4] != MAGIC:
        raise PayloadError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, d, n, comps = _HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise PayloadError(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    expected = 4 + _HEADER.size + n**d * comps * 8
    if len(raw) != expected:
        raise PayloadError(f"{path}: {len(raw)} bytes, expected {expected} (truncated?)")
    values = np.frombuffer(raw, dtype="<f8", offset=4 + _HEADER.size)
    return FieldPayload(d=d, n=n, values=values.reshape(n**d, comps).copy())


def _verify_checksum(path: Path) -> None:
    manifest_path = path.parent / MANIFEST_NAME
    if not manifest_path.exists():
        return  # ad-hoc payload without a manifest: structural checks only
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise PayloadError(f"{manifest_path}: unreadable manifest: {exc}") from exc
    checks = manifest.get("payload_checksums", {})
    if path.name not in checks:
        raise PayloadError(f"{path.name}: not listed in {manifest_path}")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != checks[path.name]:
        raise PayloadError(f"{path.name}: checksum mismatch against the manifest")


def read_metrics_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CsvError(f"{path}: no such file")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise CsvError(f"{path}: missing or unexpected header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise CsvError(f"{path}: row {lineno}: expected 8 columns, got {len(parts)}")
        try:
            rows.append({
                "experiment": parts[0], "field": parts[1], "metric": parts[2],
                "p": float(parts[3]), "N": int(parts[4]), "M": int(parts[5]),
                "S": int(parts[6]), "value": float(parts[7]),
            })
        except ValueError as exc:
            raise CsvError(f"{path}: row {lineno}: {exc}") from exc
    if not rows:
        raise CsvError(f"{path}: no rows")
    return rows
