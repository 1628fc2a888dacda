"""The CSVT1 checkpoint container.

Layout::

    CSVT1
    <name> <dtype> <dims> <offset> <nbytes>     (one line per tensor)
    <blank line>
    <raw little-endian payloads, in manifest order>

``dims`` is comma separated (``-`` for a scalar); ``offset`` counts bytes
from the first payload byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..fileio import atomic_write_bytes

MAGIC = b"CSVT1"
_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _code(dtype) -> str:
    for code, dt in _CODES.items():
        if np.dtype(dtype) == dt:
            return code
    raise CheckpointError(f"unsupported dtype {dtype}")


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    lines = [MAGIC.decode()]
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        code = _code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
        dims = ",".join(str(n) for n in arr.shape) or "-"
        lines.append(f"{name} {code} {dims} {offset} {len(raw)}")
        payloads.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    return header + b"".join(payloads)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    head, sep, body = blob.partition(b"\n\n")
    if not sep:
        raise CheckpointError("missing blank line after manifest")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != MAGIC.decode():
        raise CheckpointError(f"bad magic {lines[0][:16]!r}")
    out = {}
    for line in lines[1:]:
        try:
            name, code, dims, offset, nbytes = line.split(" ")
            dtype = _CODES[code]
            shape = () if dims == "-" else tuple(int(n) for n in dims.split(","))
            offset, nbytes = int(offset), int(nbytes)
        except (ValueError, KeyError):
            raise CheckpointError(f"malformed manifest record {line!r}") from None
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{name}: byte length does not match shape {shape}")
        if offset + nbytes > len(body):
            raise CheckpointError(f"{name}: payload truncated")
        out[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=offset).reshape(shape).copy()
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
