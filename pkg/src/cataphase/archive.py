"""Binary tensor archive used for model and optimizer checkpoints.

Layout (all integers little-endian)::

    b"PHCK"  u32 version  u32 manifest_len  manifest (UTF-8 JSON)
    u32 n_tensors
    repeated: u32 name_len, name (UTF-8), u32 rows, u32 cols,
              rows*cols float64 values, row-major

1-D tensors are written as ``(n, 1)``; the manifest's ``"vectors"`` list names
them so they load back with their original shape.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"PHCK"
VERSION = 1


class ArchiveError(ValueError):
    pass


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(manifest: dict, tensors: dict) -> bytes:
    manifest = dict(manifest)
    manifest["vectors"] = sorted(k for k, v in tensors.items() if np.ndim(v) == 1)
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(mbytes)), mbytes, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ArchiveError(f"tensor {name!r} must be 1-D or 2-D, got {arr.ndim}-D")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes):
    """Inverse of :func:`encode`; returns ``(manifest, tensors)``."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"archive truncated at byte offset {pos} (needed {n} more bytes)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("not a checkpoint archive (bad magic bytes)")
    version, mlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    try:
        manifest = json.loads(bytes(take(mlen)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"corrupt manifest: {exc}") from None
    vectors = set(manifest.pop("vectors", []))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(bytes(take(8 * rows * cols)), dtype="<f8").reshape(rows, cols)
        arr = arr.astype(np.float64)
        tensors[name] = arr.reshape(-1) if name in vectors else arr
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last tensor")
    return manifest, tensors


def save(path, manifest: dict, tensors: dict) -> None:
    atomic_write_bytes(path, encode(manifest, tensors))


def load(path):
    return decode(Path(path).read_bytes())
