"""Binary tensor container and checkpoint files.

Container layout (little-endian): magic ``CALT``, version u32, dtype code u8
(0 = f64, 1 = f32), rank u8, extents as u64 list, then the payload row-major.
Checkpoints stack one named container entry per parameter, sorted by name so
the bytes are reproducible, with a text manifest in a sidecar file.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CALT"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR = {np.dtype("float64"): 0, np.dtype("float32"): 1}

CKPT_MAGIC = b"CKPT"


class ContainerError(ValueError):
    pass


def tensor_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODE_FOR:
        raise ContainerError(f"unsupported dtype {arr.dtype}; only f64/f32 payloads")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != MAGIC:
        raise ContainerError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    code, rank = struct.unpack_from("<BB", raw, 8)
    if code not in _DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 10)
    offset = 10 + 8 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ContainerError(f"payload length {len(raw)} != expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.copy()


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict[str, str] | None = None) -> None:
    """Write named parameter arrays plus a text manifest sidecar.

    Entries are sorted by name; re-writing identical parameters yields
    byte-identical files.
    """
    path = Path(path)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        blob = tensor_bytes(arrays[name])
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    path.write_bytes(buf.getvalue())
    if manifest is not None:
        lines = [f"{k}={manifest[k]}" for k in sorted(manifest)]
        path.with_suffix(path.suffix + ".txt").write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContainerError(f"bad checkpoint magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (blob_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        arrays[name] = tensor_from_bytes(raw[offset : offset + blob_len])
        offset += blob_len
    manifest: dict[str, str] = {}
    sidecar = path.with_suffix(path.suffix + ".txt")
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            if line and "=" in line:
                key, value = line.split("=", 1)
                manifest[key] = value
    return arrays, manifest


def write_meta(path, fields: dict[str, str]) -> None:
    lines = [f"{k}={fields[k]}" for k in sorted(fields)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and "=" in line:
            key, value = line.split("=", 1)
            out[key] = value
    return out
