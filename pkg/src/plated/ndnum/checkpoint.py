"""Single-file array container.

Layout (little-endian): magic ``PLTD``, version u16, count u32, then per
array: name length u16, UTF-8 name, rank u8, dims u32 each, raw f32 payload.
"""

import struct

import numpy as np

MAGIC = b"PLTD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_arrays(path):
    out = {}
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a PLTD checkpoint")
        version, count = struct.unpack("<HI", _read(fh, 6))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", _read(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(dims)
            out[name] = data.astype(np.float32)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} arrays")
    return out
