"""Binary PGM (P5) / PPM (P6) codec, 8-bit only."""

from __future__ import annotations

import os

import numpy as np

from .tensor import Tensor


class NetpbmError(ValueError):
    """Parse failure; ``offset`` is the byte position where it was detected."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class HeaderError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


class UnsupportedMaxvalError(NetpbmError):
    pass


_WS = b" \t\n\r\v\f"


def _read_token(buf: bytes, pos: int, what: str, path) -> tuple[int, int]:
    """Next decimal header field, skipping whitespace and ``#`` comments."""
    n = len(buf)
    while pos < n:
        if buf[pos] in _WS:
            pos += 1
        elif buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise HeaderError(f"expected {what}", start, path)
    if pos < n and buf[pos] not in _WS and buf[pos] != ord("#"):
        raise HeaderError(f"malformed {what}", pos, path)
    return int(buf[start:pos]), pos


def decode(buf: bytes, path=None) -> np.ndarray:
    """Decode to a uint8 array of shape (channels, height, width)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise HeaderError(f"unsupported magic {magic!r}, expected P5 or P6", 0, path)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    width, pos = _read_token(buf, pos, "width", path)
    height, pos = _read_token(buf, pos, "height", path)
    maxval_at = pos
    maxval, pos = _read_token(buf, pos, "maxval", path)
    if width < 1 or height < 1:
        raise HeaderError(f"invalid image size {width}x{height}", maxval_at, path)
    if maxval != 255:
        raise UnsupportedMaxvalError(f"unsupported maxval {maxval}, only 255 is accepted", maxval_at, path)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise HeaderError("missing whitespace after maxval", pos, path)
    pos += 1
    expected = width * height * channels
    payload = buf[pos : pos + expected]
    if len(payload) < expected:
        raise TruncatedError(
            f"payload truncated: expected {expected} bytes, found {len(payload)}", pos + len(payload), path
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).copy()


def encode(pixels: np.ndarray) -> bytes:
    """Encode a uint8 (c, h, w) array; c = 1 gives P5, c = 3 gives P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ValueError(f"expected uint8 (1|3, h, w) array, got {pixels.dtype} {pixels.shape}")
    c, h, w = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    return header + pixels.transpose(1, 2, 0).tobytes()


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> Tensor:
    """Read a P5/P6 file as a (1, c, h, w) tensor scaled into [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    arr = decode(buf, path=os.fspath(path))
    return Tensor(arr[None].astype(np.float64) / 255.0)


def write_image(path, image) -> None:
    """Write a (1, c, h, w) / (c, h, w) tensor or array of [0, 1] values."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError(f"can only write a single image, got batch of {data.shape[0]}")
        data = data[0]
    pixels = data if data.dtype == np.uint8 else quantize(data)
    with open(path, "wb") as fh:
        fh.write(encode(pixels))
