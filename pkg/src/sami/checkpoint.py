"""Checkpoint files: a JSON config echo plus a named float32 tensor table.

Layout (little-endian)::

    b"SAMICKPT" | u32 version | u32 config_len | config JSON
    | u32 n_tensors | n x (u16 name_len | name | u8 ndim | ndim x u32 | f32 payload)
    | 32-byte SHA-256 of everything before it
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError

MAGIC = b"SAMICKPT"
VERSION = 1
OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)

    def params(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPT_PREFIX)}

    def optimizer_tensors(self):
        return {k: v for k, v in self.tensors.items() if k.startswith(OPT_PREFIX)}


def encode_checkpoint(ckpt):
    out = bytearray(MAGIC)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    out += struct.pack("<II", VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode()
        out += struct.pack("<HB", len(raw), arr.ndim) + raw
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def decode_checkpoint(buf):
    if len(buf) < len(MAGIC) + 8 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    version, cfg_len = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version} (reader knows {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    pos = len(MAGIC) + 8
    config = json.loads(body[pos:pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes after tensor table")
    return Checkpoint(config, tensors)


def save_checkpoint(path, ckpt):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
