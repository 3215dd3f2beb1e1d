"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"CODINETCKPT\\0"            magic (12 bytes)
    u32 version
    u32 len, utf-8               config text
    u64 epoch
    u64 rng seed, u64 rng stream id
    u32 array count
    per array:
        u16 len, utf-8           name
        u8 dtype (0 = f64, 1 = f32)
        u8 ndim, u64 * ndim      shape
        raw IEEE-754 data, little-endian, C order
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict

import numpy as np

MAGIC = b"CODINETCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    """Unreadable, incompatible or mismatched checkpoint."""


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    rng_seed: int
    rng_stream: int
    arrays: Dict[str, np.ndarray]


def save_checkpoint(path: "str | os.PathLike", arrays: Dict[str, np.ndarray], config_text: str, epoch: int = 0, rng_seed: int = 0, rng_stream: int = 0) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<QQQ", epoch, rng_seed & (2**64 - 1), rng_stream & (2**64 - 1)))
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<BB", code, arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: "str | os.PathLike") -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (cfg_len,) = take("<I")
    config_text = take_bytes(cfg_len).decode("utf-8")
    epoch, seed, stream = take("<QQQ")
    (count,) = take("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = take_bytes(name_len).decode("utf-8")
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: array {name} has unknown dtype code {code}")
        shape = take("<" + "Q" * ndim) if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take_bytes(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return Checkpoint(config_text, epoch, seed, stream, arrays)


def net_arrays(net) -> Dict[str, np.ndarray]:
    return {name: p.data for name, p in net.named_parameters().items()}


def restore_parameters(net, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``net``; names, shapes and dtypes must match exactly."""
    params = net.named_parameters()
    if set(params) != set(ckpt.arrays):
        missing = sorted(set(params) - set(ckpt.arrays))
        extra = sorted(set(ckpt.arrays) - set(params))
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != network shape {p.shape}")
        if arr.dtype != p.dtype:
            raise CheckpointError(f"{name}: checkpoint dtype {arr.dtype} != network dtype {p.dtype}")
        p.data = arr.copy()
