"""Binary checkpoint format.

Layout: magic "PGCK", u32 version, u32 tensor count; per tensor u16 name
length + UTF-8 name, dtype byte (0 = f32, 1 = f64), trainable byte, rank
byte, u64 dims, raw little-endian data; trailing CRC32 over all preceding
bytes. Saves are byte-deterministic for identical state.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"PGCK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

STEP_KEY = "__step__"
CONFIG_HASH_KEY = "__config_hash__"


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


def save_checkpoint(path, tensors: list[tuple[str, np.ndarray, bool]]) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(tensors))
    for name, arr, trainable in tensors:
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        body += struct.pack("<H", len(raw_name))
        body += raw_name
        body += struct.pack("<BBB", code, 1 if trainable else 0, arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path) -> list[tuple[str, np.ndarray, bool]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("missing PGCK magic")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CorruptCheckpointError("CRC32 mismatch (truncated or corrupt file)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, trainable, rank = struct.unpack_from("<BBB", blob, off)
        off += 3
        dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        dtype = _DTYPES[code]
        nbytes = size * np.dtype(dtype).itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
        tensors.append((name, arr, bool(trainable)))
    return tensors


def config_hash(canonical_config: str) -> int:
    return zlib.crc32(canonical_config.encode("utf-8"))


def pack_state(model, optimizer=None, step: int = 0,
               config_digest: int = 0) -> list[tuple[str, np.ndarray, bool]]:
    """Model tensors plus optimizer moments, step counter, and config hash."""
    tensors = [(name, p.data, p.trainable)
               for name, p in sorted(model.parameters().items())]
    if optimizer is not None:
        for name in sorted(optimizer.moments):
            m, v = optimizer.moments[name]
            tensors.append((f"opt.m.{name}", m, False))
            tensors.append((f"opt.v.{name}", v, False))
    tensors.append((STEP_KEY, np.asarray(float(step)), False))
    tensors.append((CONFIG_HASH_KEY, np.asarray(float(config_digest)), False))
    return tensors


def restore_state(model, tensors: list[tuple[str, np.ndarray, bool]],
                  optimizer=None, expect_config_digest: int | None = None) -> int:
    """Write tensors back into the model (and optimizer); returns the step."""
    table = {name: arr for name, arr, _ in tensors}
    if expect_config_digest is not None:
        stored = int(table.get(CONFIG_HASH_KEY, np.asarray(-1.0)))
        if stored != expect_config_digest:
            raise ConfigHashMismatchError(
                f"checkpoint config hash {stored} != current {expect_config_digest}")
    for name, param in model.parameters().items():
        if name not in table:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        param.data = table[name]
    if optimizer is not None:
        for name in optimizer.moments:
            optimizer.moments[name] = (table[f"opt.m.{name}"].astype(np.float64),
                                       table[f"opt.v.{name}"].astype(np.float64))
    return int(float(table.get(STEP_KEY, np.asarray(0.0))))
