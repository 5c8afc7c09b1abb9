"""Binary PGM (P5) / PPM (P6) reading and writing at 8-bit depth."""
from __future__ import annotations

import os

import numpy as np

from .errors import ParseError

_MAGIC = {b"P5": 1, b"P6": 3}


def _header_fields(buf, count):
    """Read ``count`` whitespace-separated ASCII fields (``#`` comments allowed)."""
    fields = []
    pos = 0
    n = len(buf)
    while len(fields) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise ParseError(f"header ended after {len(fields)} of {count} fields", pos)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        fields.append((buf[start:pos], start))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    return fields, pos + 1


def decode_pnm(buf):
    """Parse P5/P6 bytes into ``uint8`` arrays of shape ``H x W`` or ``H x W x 3``."""
    magic = bytes(buf[:2])
    if magic not in _MAGIC:
        raise ParseError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    fields, data_start = _header_fields(buf, 4)
    values = []
    for raw, off in fields[1:]:
        try:
            values.append(int(raw))
        except ValueError:
            raise ParseError(f"non-integer header field {raw!r}", off) from None
    width, height, maxval = values
    for (raw, off), v in zip(fields[1:], values):
        if v <= 0:
            raise ParseError(f"header field {raw!r} must be positive", off)
    if maxval > 255:
        raise ParseError(f"maxval {maxval} is not 8-bit", fields[3][1])
    chans = _MAGIC[magic]
    expected = width * height * chans
    payload = buf[data_start:data_start + expected]
    if len(payload) < expected:
        raise ParseError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}", data_start)
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, chans) if chans == 3 else arr.reshape(height, width)


def encode_pnm(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store an image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def load_image(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def save_image(path, img):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_pnm(img))
    os.replace(tmp, path)


def to_uint8(x):
    """[0, 1] floats -> uint8 with rounding."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_float(img):
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def save_mask(path, mask):
    save_image(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def load_mask(path):
    return load_image(path) > 127
