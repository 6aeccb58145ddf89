"""Named-array archive format for model files and checkpoints.

Layout (all integers little-endian uint32 unless noted):

    magic      6 bytes ascii ("RAVMM1" for morphable models, "RAVCK1" for
               network checkpoints)
    version    uint32
    n_meta     uint32, followed by n_meta uint32 header integers
               (morphable models store V, K_s, K_e, F here)
    n_arrays   uint32
    per array: name_len uint32, name utf-8 bytes, dtype code 1 byte
               (b"f" float32 / b"i" int32), ndim uint32, shape uint32[ndim],
               raw little-endian array data

Floats are stored as 32-bit, indices as 32-bit ints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"RAVMM1"
CHECKPOINT_MAGIC = b"RAVCK1"
VERSION = 1

_DTYPES = {b"f": np.dtype("<f4"), b"i": np.dtype("<i4")}


class ArchiveError(ValueError):
    """Raised on malformed archive files."""


def save_archive(path, arrays: dict, magic: bytes, meta: tuple = ()) -> None:
    """Write named arrays to `path`. Float arrays become f4, integer arrays i4."""
    if magic not in (MODEL_MAGIC, CHECKPOINT_MAGIC):
        raise ArchiveError(f"unknown magic {magic!r}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        for m in meta:
            fh.write(struct.pack("<I", int(m)))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            code = b"i" if np.issubdtype(arr.dtype, np.integer) else b"f"
            arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(code)
            fh.write(struct.pack("<I", arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<I", s))
            fh.write(arr.tobytes())


def load_archive(path, expect_magic: bytes | None = None):
    """Read an archive; returns (arrays dict, meta tuple, magic)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic not in (MODEL_MAGIC, CHECKPOINT_MAGIC):
            raise ArchiveError(f"bad magic {magic!r} in {path}")
        if expect_magic is not None and magic != expect_magic:
            raise ArchiveError(f"expected {expect_magic!r}, found {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta = struct.unpack(f"<{n_meta}I", fh.read(4 * n_meta)) if n_meta else ()
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code = fh.read(1)
            if code not in _DTYPES:
                raise ArchiveError(f"bad dtype code {code!r}")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * 4)
            if len(data) != count * 4:
                raise ArchiveError(f"truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype=_DTYPES[code]).reshape(shape).copy()
    return arrays, meta, magic
