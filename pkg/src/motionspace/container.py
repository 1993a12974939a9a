"""Binary container: magic, JSON header, then raw little-endian float32 arrays.

Layout::

    b"MSPC" | uint32 version | uint64 header_len | header (utf-8 JSON) | payload

The header holds free-form metadata under ``"meta"`` and an ordered list of
``{"name", "shape", "offset"}`` entries under ``"arrays"``. Offsets are byte
offsets into the payload. Every array is stored as ``<f4``.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptArtifactError

MAGIC = b"MSPC"
VERSION = 1


def encode(arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        arr = np.asarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptArtifactError("bad magic")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CorruptArtifactError(f"unsupported container version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifactError(f"unreadable header: {exc}") from exc
    payload = memoryview(blob)[16 + hlen:]
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CorruptArtifactError(f"array {entry['name']!r} truncated")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return arrays, header.get("meta", {})


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: dict, meta: dict | None = None) -> None:
    atomic_write(path, encode(arrays, meta))


def load(path) -> tuple[dict, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptArtifactError(str(exc)) from exc
    return decode(blob)
