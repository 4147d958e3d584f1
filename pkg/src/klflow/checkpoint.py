"""Binary checkpoint container.

Layout: 8 magic bytes ``KLFMCKPT``, a 4-byte little-endian unsigned manifest
length, the JSON manifest, then the raw little-endian tensor payload.
The manifest lists every tensor as {name, dtype, shape, byte_offset,
byte_length} (offsets relative to the payload start) plus a free-form
metadata object. Round trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"KLFMCKPT"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(params: dict[str, np.ndarray], metadata: dict, path) -> None:
    """Write tensors and metadata; tensors keep their dtype (f32 or f64)."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "metadata": metadata},
                          sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None):
    """Read (params, metadata); validates structure before any tensor is built.

    With ``expected_shapes`` given, every expected tensor must be present
    with the declared shape; the error names the offending tensor.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 4:
        raise FormatError(f"checkpoint {path} truncated before header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"checkpoint {path} has wrong magic bytes")
    (manifest_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_end = len(MAGIC) + 4 + manifest_len
    if len(blob) < header_end:
        raise FormatError(f"checkpoint {path} truncated inside manifest")
    try:
        manifest = json.loads(blob[len(MAGIC) + 4: header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint {path} manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise FormatError(f"checkpoint {path} manifest missing tensor table")

    payload = blob[header_end:]
    params: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry.get("name", "<unnamed>")
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {name!r} has unknown dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        start, length = entry["byte_offset"], entry["byte_length"]
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if length != want:
            raise FormatError(
                f"tensor {name!r} declares {length} bytes but shape {shape} needs {want}")
        if start < 0 or start + length > len(payload):
            raise FormatError(f"tensor {name!r} payload range is out of bounds")
        arr = np.frombuffer(payload[start: start + length], dtype=dtype).reshape(shape)
        params[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in params:
                raise FormatError(f"checkpoint missing tensor {name!r}")
            if params[name].shape != tuple(shape):
                raise FormatError(
                    f"tensor {name!r} has shape {params[name].shape}, "
                    f"config expects {tuple(shape)}")
    return params, manifest.get("metadata", {})
