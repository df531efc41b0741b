"""Minimal image file codecs: 8-bit non-interlaced PNG (gray or RGB) and
binary PPM (P6). Ancillary PNG chunks are ignored on read; the encoder emits
unfiltered scanlines so save/load round-trips are byte-identical.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import ImageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def write_atomic(path: str, payload: bytes) -> None:
    """Write via a temp file and rename so failures leave no partial output."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ----------------------------------------------------------------------------
# PNG
# ----------------------------------------------------------------------------

def _chunk(kind: bytes, data: bytes) -> bytes:
    return (struct.pack(">I", len(data)) + kind + data
            + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF))


def encode_png(arr: np.ndarray) -> bytes:
    """Encode (H, W, C) uint8, C in {1, 3}."""
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"PNG encoder needs (H, W, 1|3) uint8, got {arr.shape} {arr.dtype}")
    h, w, c = arr.shape
    color_type = 0 if c == 1 else 2
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    raw = bytearray()
    flat = arr.reshape(h, w * c)
    for row in flat:
        raw.append(0)  # filter: none
        raw.extend(row.tobytes())
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(bytes(raw), 6)) + _chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(data: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    expect = h * (stride + 1)
    if len(data) != expect:
        raise ImageError(f"decompressed PNG stream has {len(data)} bytes, expected {expect}")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        row = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        pos += stride + 1
        if ftype == 0:
            rec = row
        elif ftype == 1:
            rec = row.astype(np.int64)
            for lane in range(bpp):
                rec[lane::bpp] = np.cumsum(rec[lane::bpp]) % 256
            rec = rec.astype(np.uint8)
        elif ftype == 2:
            rec = row + prev
        elif ftype in (3, 4):
            rec = np.zeros(stride, dtype=np.uint8)
            for i in range(stride):
                left = int(rec[i - bpp]) if i >= bpp else 0
                up = int(prev[i])
                if ftype == 3:
                    pred = (left + up) >> 1
                else:
                    upleft = int(prev[i - bpp]) if i >= bpp else 0
                    pred = _paeth(left, up, upleft)
                rec[i] = (int(row[i]) + pred) & 0xFF
        else:
            raise ImageError(f"unknown PNG filter type {ftype} in row {y}")
        out[y] = rec
        prev = rec
    return out.reshape(h, w, bpp)


def decode_png(blob: bytes) -> np.ndarray:
    if blob[:8] != PNG_SIGNATURE:
        raise ImageError("not a PNG file: bad signature at offset 0")
    pos = 8
    header = None
    idat = bytearray()
    seen_end = False
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ImageError(f"truncated chunk header at offset {pos}")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        kind = blob[pos + 4:pos + 8]
        body_at = pos + 8
        if body_at + length + 4 > len(blob):
            raise ImageError(f"truncated {kind.decode('latin1')} chunk at offset {pos}")
        data = blob[body_at:body_at + length]
        (crc,) = struct.unpack(">I", blob[body_at + length:body_at + length + 4])
        if crc != (zlib.crc32(kind + data) & 0xFFFFFFFF):
            raise ImageError(f"CRC mismatch in {kind.decode('latin1')} chunk at offset {pos}")
        if kind == b"IHDR":
            if length != 13:
                raise ImageError(f"IHDR length {length} at offset {pos}, expected 13")
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat.extend(data)
        elif kind == b"IEND":
            seen_end = True
            break
        # ancillary chunks ignored
        pos = body_at + length + 4
    if header is None:
        raise ImageError("missing IHDR chunk")
    if not seen_end:
        raise ImageError("missing IEND chunk")
    w, h, depth, color, comp, filt, interlace = header
    if depth != 8:
        raise ImageError(f"unsupported bit depth {depth}, only 8 is handled")
    if color not in (0, 2):
        raise ImageError(f"unsupported color type {color}, only gray (0) and RGB (2) are handled")
    if comp != 0 or filt != 0:
        raise ImageError(f"unsupported compression/filter method {comp}/{filt}")
    if interlace != 0:
        raise ImageError("interlaced PNG is not supported")
    if w < 1 or h < 1:
        raise ImageError(f"bad image geometry {w}x{h}")
    try:
        stream = zlib.decompress(bytes(idat))
    except zlib.error as e:
        raise ImageError(f"corrupt IDAT stream: {e}") from e
    return _unfilter(stream, h, w, 1 if color == 0 else 3)


# ----------------------------------------------------------------------------
# PPM (P6)
# ----------------------------------------------------------------------------

def encode_ppm(arr: np.ndarray) -> bytes:
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"PPM encoder needs (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P6":
        raise ImageError("not a P6 PPM file: bad magic at offset 0")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(blob):
            raise ImageError(f"truncated PPM header at offset {pos}")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ImageError(f"malformed PPM header near offset {pos}: {e}") from e
    if maxval != 255:
        raise ImageError(f"unsupported PPM maxval {maxval}, only 255 is handled")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    if len(blob) - pos < need:
        raise ImageError(f"truncated PPM payload at offset {pos}: need {need} bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()
