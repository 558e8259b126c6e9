"""Binary checkpoints for model state.

Layout (all integers little-endian):

    magic   4 bytes  b"DCD1"
    version u32      currently 1
    count   u32      number of tensors
    count * manifest entries:
        name_len u16, name utf-8 bytes, ndim u8, ndim * u32 shape,
        offset u64   (byte offset into the payload region)
    payload  concatenated float64 C-order tensor data
    checksum u64     FNV-1a 64 over every preceding byte

State covers every parameter plus batch-norm running statistics, in model
iteration order.  Loading verifies magic, checksum, and per-tensor shapes
before touching the model, and reports the first offending tensor by name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCD1"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class UnexpectedTensorError(CheckpointError):
    pass


def save_checkpoint(path: str | Path, state: list[tuple[str, np.ndarray]]) -> None:
    manifest = bytearray()
    payload = bytearray()
    for name, value in state:
        arr = np.asarray(value, dtype=np.float64)  # tobytes() emits C order
        encoded = name.encode("utf-8")
        manifest += struct.pack("<H", len(encoded)) + encoded
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    body = MAGIC + struct.pack("<II", VERSION, len(state)) + bytes(manifest) + bytes(payload)
    Path(path).write_bytes(body + struct.pack("<Q", fnv1a64(body)))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    body, stored = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    actual = fnv1a64(body)
    if actual != stored:
        raise ChecksumError(
            f"{path}: checksum mismatch (stored {stored:#018x}, computed {actual:#018x})"
        )
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        entries.append((name, shape, offset))
    out: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = pos + offset
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(shape)
        out[name] = arr.copy()
    return out


def load_into(graph, path: str | Path) -> None:
    """Restore a model's state, validating names and shapes first."""
    data = load_checkpoint(path)
    expected = graph.state_items()
    for name, current in expected:
        if name not in data:
            raise MissingTensorError(f"{path}: checkpoint is missing tensor {name!r}")
        have = data[name].shape
        want = np.asarray(current).shape
        if have != want:
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} has shape {have}, model expects {want}"
            )
    known = {name for name, _ in expected}
    for name in data:
        if name not in known:
            raise UnexpectedTensorError(f"{path}: checkpoint has unknown tensor {name!r}")
    graph.load_state(data)


def save_model(graph, path: str | Path) -> None:
    save_checkpoint(path, graph.state_items())
