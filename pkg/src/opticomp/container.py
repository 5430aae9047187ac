"""LTEN v1 tensor container.

Layout, all little-endian:

    bytes 0..3    magic ``LTEN`` (ASCII)
    bytes 4..7    format version, uint32 (currently 1)
    bytes 8..15   manifest byte length, uint64
    manifest      UTF-8 JSON object; ``manifest["tensors"]`` is a list of
                  ``{name, dtype, shape, byte_offset, byte_len}`` entries
                  with byte_offset relative to the start of the blob region
    blob          raw tensor data, each tensor aligned to a 64-byte boundary

Supported dtypes are ``f32`` (little-endian float32) and ``i32``
(little-endian int32). Extra manifest keys (e.g. a model graph) ride along
untouched. Round trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTEN"
VERSION = 1
ALIGNMENT = 64

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


class ContainerError(Exception):
    """Base class for LTEN container failures."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class ShapeDisagreementError(ContainerError):
    """Manifest entry and blob extent disagree about a tensor's size."""


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype.kind in "iu":
        return "i32"
    raise ContainerError(f"unsupported tensor dtype {arr.dtype}")


def write_container(path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write tensors (name -> array) plus optional extra manifest keys.

    Float arrays are stored as f32 and integer arrays as i32; tensor order
    in the file is sorted by name so identical inputs produce identical
    bytes.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = _dtype_name(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        pad = (-offset) % ALIGNMENT
        offset += pad
        blobs.append((pad, data))
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_len": len(data),
            }
        )
        offset += len(data)

    manifest = dict(extra or {})
    manifest["tensors"] = entries
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for pad, data in blobs:
            fh.write(b"\x00" * pad)
            fh.write(data)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an LTEN file, returning (manifest, tensors).

    f32 tensors come back as float32 arrays and i32 as int32; promotion to
    float64 is left to the caller so storage bits stay inspectable.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedBlobError(f"{path}: file shorter than the 16-byte header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    (manifest_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + manifest_len > len(raw):
        raise TruncatedBlobError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: manifest is not valid JSON: {exc}") from exc

    blob = raw[16 + manifest_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: tensor {name!r} has unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        start, length = entry["byte_offset"], entry["byte_len"]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != length:
            raise ShapeDisagreementError(
                f"{path}: tensor {name!r} shape {shape} needs {expected} bytes, manifest says {length}"
            )
        if start + length > len(blob):
            raise TruncatedBlobError(f"{path}: tensor {name!r} extends past end of blob")
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=start).reshape(shape)
    return manifest, tensors
