"""8-bit RGB image files (PNG and binary PPM) and tensor conversion.

Only the subset needed here is supported: PNG with bit depth 8, colour type
RGB (2), RGBA (6, alpha dropped) or greyscale (0, replicated); no interlace.
Writing always produces RGB. Format is detected from magic bytes on read
and from the file extension on write.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor

PNG_SIG = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 6: 4}


@dataclass
class ImageBuffer:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError("image extents must be positive")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ShapeError(f"pixels must be uint8 {(self.height, self.width, 3)}, got "
                             f"{self.pixels.dtype} {self.pixels.shape}")


# ------------------------------------------------------------------ tensors


def buffer_to_tensor(buf: ImageBuffer, dtype=np.float32) -> Tensor:
    """``(1, 3, h, w)`` tensor with ``v = byte / 255``."""
    return Tensor((buf.pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0).astype(dtype))


def quantize(values: np.ndarray) -> np.ndarray:
    """``round(clamp(v, 0, 1) * 255)`` with halves rounded up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def tensor_to_buffer(t: Tensor, index: int = 0) -> ImageBuffer:
    if t.shape[1] != 3:
        raise ShapeError(f"need 3 channels, got {t.shape[1]}")
    px = quantize(t.data[index]).transpose(1, 2, 0)
    return ImageBuffer(px.shape[1], px.shape[0], np.ascontiguousarray(px))


# ---------------------------------------------------------------------- PNG


def _chunk(tag: bytes, body: bytes) -> bytes:
    crc = zlib.crc32(tag + body) & 0xFFFFFFFF
    return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", crc)


def encode_png(buf: ImageBuffer) -> bytes:
    ihdr = struct.pack(">IIBBBBB", buf.width, buf.height, 8, 2, 0, 0, 0)
    rows = np.empty((buf.height, 1 + 3 * buf.width), dtype=np.uint8)
    rows[:, 0] = 0  # filter type None
    rows[:, 1:] = buf.pixels.reshape(buf.height, -1)
    return (PNG_SIG + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9))
            + _chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, height: int, stride: int, bpp: int, offset: int) -> np.ndarray:
    need = height * (stride + 1)
    if len(raw) < need:
        raise FormatError(f"image data too short: {len(raw)} of {need} bytes", offset)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        base = y * (stride + 1)
        ftype = raw[base]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=base + 1).astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[x]) >> 1
                else:
                    pred = _paeth(left, prev[x], prev[x - bpp] if x >= bpp else 0)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise FormatError(f"unknown PNG filter type {ftype} in row {y}", offset)
        out[y] = cur
        prev = cur
    return out


def decode_png(data: bytes) -> ImageBuffer:
    if data[:8] != PNG_SIG:
        raise FormatError("missing PNG signature", 0)
    pos = 8
    header = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(data):
            raise FormatError("truncated PNG chunk header", pos)
        length, tag = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise FormatError(f"truncated PNG chunk {tag!r}", pos)
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length:end])
        if zlib.crc32(tag + body) & 0xFFFFFFFF != crc:
            raise FormatError(f"CRC mismatch in chunk {tag!r}", pos)
        if tag == b"IHDR":
            if length != 13:
                raise FormatError("bad IHDR length", pos)
            header = struct.unpack(">IIBBBBB", body)
        elif tag == b"IDAT":
            idat_offset = pos if idat_offset is None else idat_offset
            idat.append(body)
        elif tag == b"IEND":
            break
        pos = end
    if header is None:
        raise FormatError("PNG without IHDR", 8)
    width, height, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype not in _CHANNELS or interlace != 0 or width == 0 or height == 0:
        raise FormatError(f"unsupported PNG (depth={depth}, colour type={ctype}, interlace={interlace})", 16)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FormatError(f"corrupt PNG image data: {exc}", idat_offset) from None
    ch = _CHANNELS[ctype]
    px = _unfilter(raw, height, width * ch, ch, idat_offset).reshape(height, width, ch)
    if ch == 1:
        px = np.repeat(px, 3, axis=2)
    elif ch == 4:
        px = px[:, :, :3]
    return ImageBuffer(width, height, np.ascontiguousarray(px))


# ---------------------------------------------------------------------- PPM


def encode_ppm(buf: ImageBuffer) -> bytes:
    return f"P6\n{buf.width} {buf.height}\n255\n".encode("ascii") + buf.pixels.tobytes()


def decode_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise FormatError("missing P6 magic", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl
            pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header", start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("PPM header must end with one whitespace byte", pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255 or width == 0 or height == 0:
        raise FormatError(f"unsupported PPM (maxval={maxval}, {width}x{height})", 2)
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(f"truncated PPM payload: {len(data) - pos} of {need} bytes", pos)
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return ImageBuffer(width, height, px.copy())


# ----------------------------------------------------------------- file I/O


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode_image(data: bytes) -> ImageBuffer:
    if data[:8] == PNG_SIG:
        return decode_png(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise FormatError("unrecognised image format (expected PNG or binary PPM)", 0)


def read_image(path) -> ImageBuffer:
    return decode_image(Path(path).read_bytes())


def encode_image(buf: ImageBuffer, suffix: str) -> bytes:
    suffix = suffix.lower()
    if suffix == ".png":
        return encode_png(buf)
    if suffix in (".ppm", ".pnm"):
        return encode_ppm(buf)
    raise FormatError(f"cannot choose a format for extension {suffix!r}")


def write_image(path, buf: ImageBuffer) -> None:
    path = Path(path)
    write_atomic(path, encode_image(buf, path.suffix))
