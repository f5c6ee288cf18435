"""Binary checkpoint format: named tensors plus metadata.

Layout (all integers little-endian):

    magic               8 bytes  b"SPSKCKPT"
    version             u32
    crc32               u32      checksum of everything that follows
    meta_len, meta      u32 + UTF-8 JSON object (string values)
    tensor_count        u32
    per tensor:         u16 name_len + name, u8 dtype (0=f32, 1=f64),
                        u8 ndim, u32 dims..., raw little-endian values

The same container stores model parameters, optimizer moments
(``opt.m.<name>`` / ``opt.v.<name>``), the config snapshot, and the step
counter, so a round trip reproduces forward passes bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IntegrityError, VersionError

__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "write_tensors", "read_tensors",
           "save_checkpoint", "load_checkpoint"]

MAGIC = b"SPSKCKPT"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: "<f4", 1: "<f8"}


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    parts = [b""]
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)) + meta_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _DTYPE_CODES[arr.dtype]
        parts.append(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code]).tobytes())
    payload = b"".join(parts)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, crc = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = blob[16:]
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")

    view = memoryview(payload)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"{path}: truncated payload")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = np.dtype(_CODE_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return tensors, meta


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    step: int = 0
    config_text: str = ""


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in ckpt.opt_m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in ckpt.opt_v.items():
        tensors[f"opt.v.{name}"] = arr
    meta = {"step": str(ckpt.step), "adam_t": str(ckpt.adam_t), "config": ckpt.config_text}
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    ckpt = Checkpoint(params={}, step=int(meta.get("step", "0")),
                      adam_t=int(meta.get("adam_t", "0")),
                      config_text=meta.get("config", ""))
    for name, arr in tensors.items():
        if name.startswith("param."):
            ckpt.params[name[len("param."):]] = arr
        elif name.startswith("opt.m."):
            ckpt.opt_m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            ckpt.opt_v[name[len("opt.v."):]] = arr
        else:
            raise DataError(f"{path}: unexpected tensor entry {name!r}")
    return ckpt
