"""Versioned binary container shared by every persisted artifact.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"DLAGUARD"
    8       4     artifact kind, e.g. b"TRCE" (traces), b"ADVS" (adversarial set), b"MODL" (model), b"ALRM" (alarm)
    12      2     format version (uint16)
    14      4     metadata length in bytes (uint32)
    18      n     metadata, UTF-8 JSON with sorted keys; `arrays` lists name, dtype and shape
    18+n    ...   raw array bytes, little-endian, row-major, in the order listed
    end-4   4     CRC-32 of every preceding byte (uint32)

Writing is deterministic: identical metadata and arrays produce identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import FormatError
from .tensor import Array

MAGIC = b"DLAGUARD"
FORMAT_VERSION = 1

KIND_TRACES = b"TRCE"
KIND_ADVERSARIAL = b"ADVS"
KIND_MODEL = b"MODL"
KIND_ALARM = b"ALRM"

_HEADER = struct.Struct("<8s4sHI")
_CRC = struct.Struct("<I")


def _little_endian(array: Array) -> Array:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def encode_container(kind: bytes, metadata: dict[str, Any], arrays: dict[str, Array]) -> bytes:
    """Serialize metadata and named arrays into container bytes."""
    prepared = {name: _little_endian(np.asarray(array)) for name, array in arrays.items()}
    meta = dict(metadata)
    meta["arrays"] = [
        {"name": name, "dtype": array.dtype.str, "shape": list(array.shape)} for name, array in prepared.items()
    ]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(_HEADER.pack(MAGIC, kind, FORMAT_VERSION, len(meta_bytes)))
    body += meta_bytes
    for array in prepared.values():
        body += array.tobytes(order="C")
    body += _CRC.pack(zlib.crc32(body))
    return bytes(body)


def decode_container(data: bytes, kind: bytes, source: str = "<memory>") -> tuple[dict[str, Any], dict[str, Array]]:
    """Parse container bytes, checking magic, kind, version and checksum.

    Args:
        data: The raw container bytes
        kind: Expected artifact kind
        source: Name used in error messages

    Returns:
        Tuple of (metadata without the array table, arrays by name)

    Raises:
        FormatError: If the bytes are not a valid container of the expected kind
    """
    if len(data) < _HEADER.size + _CRC.size:
        error_msg = f"{source}: truncated container ({len(data)} bytes)"
        raise FormatError(error_msg)
    magic, found_kind, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        error_msg = f"{source}: not a dla-guard container (bad magic)"
        raise FormatError(error_msg)
    if found_kind != kind:
        error_msg = f"{source}: expected a {kind.decode()} container, found {found_kind.decode(errors='replace')}"
        raise FormatError(error_msg)
    if version != FORMAT_VERSION:
        error_msg = f"{source}: unsupported container version {version} (expected {FORMAT_VERSION})"
        raise FormatError(error_msg)
    (stored_crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: -_CRC.size]) != stored_crc:
        error_msg = f"{source}: checksum mismatch"
        raise FormatError(error_msg)

    offset = _HEADER.size
    try:
        metadata: dict[str, Any] = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        error_msg = f"{source}: unreadable metadata block"
        raise FormatError(error_msg) from err
    offset += meta_len

    arrays: dict[str, Array] = {}
    payload_end = len(data) - _CRC.size
    for entry in metadata.pop("arrays", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > payload_end:
            error_msg = f"{source}: array {entry['name']!r} is truncated"
            raise FormatError(error_msg)
        if nbytes:
            flat = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            arrays[entry["name"]] = flat.reshape(shape).copy()
        else:
            arrays[entry["name"]] = np.zeros(shape, dtype=dtype)
        offset += nbytes
    if offset != payload_end:
        error_msg = f"{source}: {payload_end - offset} unexpected trailing bytes"
        raise FormatError(error_msg)
    return metadata, arrays


def write_container(path: Path, kind: bytes, metadata: dict[str, Any], arrays: dict[str, Array]) -> None:
    """Write a container file, replacing any previous file atomically."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(encode_container(kind, metadata, arrays))
    tmp_path.replace(path)


def read_container(path: Path, kind: bytes) -> tuple[dict[str, Any], dict[str, Array]]:
    """Read a container file of the expected kind."""
    try:
        data = path.read_bytes()
    except OSError as err:
        error_msg = f"Failed to read {path}: {err}"
        raise FormatError(error_msg) from err
    return decode_container(data, kind, source=str(path))
