"""Binary weight files.

Layout: magic ``b"OPGW"``, u32 version, then records until end of file, each
``u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 payload`` (all
little-endian). Non-tensor state (JSON) travels in records whose payload is the
UTF-8 text padded to a multiple of four bytes and reinterpreted as f32 words.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OPGW"
VERSION = 1
BLOB_PREFIX = "meta."


class CheckpointError(ValueError):
    pass


def _encode_blob(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4")


def _decode_blob(arr: np.ndarray):
    return json.loads(arr.astype("<f4").tobytes().decode("utf-8"))


def write_records(path: str | Path, tensors: dict[str, np.ndarray], blobs: dict[str, object] | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    items = list(tensors.items())
    items += [(BLOB_PREFIX + k, _encode_blob(v)) for k, v in (blobs or {}).items()]
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def read_records(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    blobs: dict[str, object] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated record")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith(BLOB_PREFIX):
            try:
                blobs[name[len(BLOB_PREFIX) :]] = _decode_blob(arr)
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt metadata record {name}") from exc
        else:
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate record {name}")
            tensors[name] = arr
    return tensors, blobs
