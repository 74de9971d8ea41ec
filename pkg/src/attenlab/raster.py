"""PNG encode/decode and baseline JPEG decode for 8-bit rasters.

Decoded images are always ``(h, w, 3)`` uint8 RGB; alpha is dropped and
grayscale is replicated across channels.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from .errors import FormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an ``(h, w)`` gray or ``(h, w, 3)`` RGB uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise FormatError("PNG encoder needs uint8 pixels")
    if pixels.ndim == 2:
        color = 0
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color = 2
    else:
        raise FormatError(f"unsupported pixel array shape {pixels.shape}")
    h, w = pixels.shape[:2]
    if h == 0 or w == 0:
        raise FormatError("cannot encode a zero-area image")
    rows = pixels.reshape(h, -1)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b"")


def _paeth_row(line: bytearray, prev: bytes, bpp: int) -> None:
    for i in range(len(line)):
        a = line[i - bpp] if i >= bpp else 0
        b = prev[i]
        c = prev[i - bpp] if i >= bpp else 0
        p = a + b - c
        pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
        if pa <= pb and pa <= pc:
            pred = a
        elif pb <= pc:
            pred = b
        else:
            pred = c
        line[i] = (line[i] + pred) & 0xFF


def _unfilter(data: bytes, h: int, stride: int, bpp: int, offset: int) -> np.ndarray:
    if len(data) != h * (stride + 1):
        raise FormatError(
            f"IDAT at byte {offset}: decompressed {len(data)} bytes, expected {h * (stride + 1)}"
        )
    out = np.zeros((h, stride), np.uint8)
    prev = bytes(stride)
    for y in range(h):
        ftype = data[y * (stride + 1)]
        line = bytearray(data[y * (stride + 1) + 1 : (y + 1) * (stride + 1)])
        if ftype == 0:
            pass
        elif ftype == 1:
            arr = np.frombuffer(bytes(line), np.uint8).astype(np.int64)
            for c in range(bpp):
                arr[c::bpp] = np.cumsum(arr[c::bpp]) & 0xFF
            line = bytearray(arr.astype(np.uint8).tobytes())
        elif ftype == 2:
            line = bytearray(((np.frombuffer(bytes(line), np.uint8).astype(np.int64) + np.frombuffer(prev, np.uint8)) & 0xFF).astype(np.uint8).tobytes())
        elif ftype == 3:
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((a + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            _paeth_row(line, prev, bpp)
        else:
            raise FormatError(f"IDAT at byte {offset}: unknown filter type {ftype} on row {y}")
        prev = bytes(line)
        out[y] = np.frombuffer(prev, np.uint8)
    return out


def decode_png(data: bytes) -> np.ndarray:
    if data[:8] != PNG_SIGNATURE:
        raise FormatError("PNG signature mismatch at byte 0")
    pos = 8
    header = None
    palette = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(data):
            raise FormatError(f"truncated PNG: chunk header expected at byte {pos}")
        length, kind = struct.unpack(">I4s", data[pos : pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise FormatError(f"truncated PNG: chunk {kind!r} at byte {pos} runs past end of stream")
        body = data[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", data[pos + 8 + length : end])
        if zlib.crc32(kind + body) & 0xFFFFFFFF != crc:
            raise FormatError(f"CRC mismatch in chunk {kind!r} at byte {pos}")
        if kind == b"IHDR":
            if length != 13:
                raise FormatError(f"bad IHDR length at byte {pos}")
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"PLTE":
            palette = np.frombuffer(body, np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            if idat_offset is None:
                idat_offset = pos
            idat.append(body)
        elif kind == b"IEND":
            break
        pos = end
    if header is None:
        raise FormatError("PNG has no IHDR chunk (byte 8)")
    w, h, depth, color, _, _, interlace = header
    if w == 0 or h == 0:
        raise FormatError("PNG has zero area (IHDR at byte 8)")
    if color not in _CHANNELS or depth not in (8, 16) or interlace != 0:
        raise FormatError(
            f"unsupported PNG variant at byte 8: depth {depth}, color type {color}, interlace {interlace}"
        )
    if not idat:
        raise FormatError(f"PNG has no IDAT chunk (IEND at byte {pos})")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FormatError(f"corrupt IDAT stream starting at byte {idat_offset}: {exc}") from None
    ch = _CHANNELS[color]
    bpp = ch * depth // 8
    rows = _unfilter(raw, h, w * bpp, bpp, idat_offset)
    px = rows.reshape(h, w, ch * depth // 8)
    if depth == 16:
        px = px[:, :, 0::2]
    if color == 3:
        if palette is None:
            raise FormatError("palette PNG without PLTE chunk")
        idx = px[:, :, 0]
        if idx.max() >= len(palette):
            raise FormatError("palette index out of range")
        return palette[idx].copy()
    if ch in (1, 2):
        return np.repeat(px[:, :, :1], 3, axis=2)
    return np.ascontiguousarray(px[:, :, :3])


def _check_jpeg(data: bytes) -> None:
    """Walk JPEG markers so truncation is reported with a byte offset."""
    if data[:2] != b"\xff\xd8":
        raise FormatError("JPEG SOI marker missing at byte 0")
    pos = 2
    n = len(data)
    while True:
        if pos >= n:
            raise FormatError(f"truncated JPEG: marker expected at byte {pos}")
        if data[pos] != 0xFF:
            raise FormatError(f"JPEG marker expected at byte {pos}, found 0x{data[pos]:02x}")
        while pos < n and data[pos] == 0xFF:
            pos += 1
        if pos >= n:
            raise FormatError(f"truncated JPEG: marker code expected at byte {pos}")
        code = data[pos]
        pos += 1
        if code == 0xD9:
            return
        if code == 0x01 or 0xD0 <= code <= 0xD7:
            continue
        if pos + 2 > n:
            raise FormatError(f"truncated JPEG: segment length expected at byte {pos}")
        (length,) = struct.unpack(">H", data[pos : pos + 2])
        if pos + length > n:
            raise FormatError(f"truncated JPEG: segment 0x{code:02x} at byte {pos - 2} runs past end of stream")
        pos += length
        if code == 0xDA:
            # entropy-coded data runs until a marker other than stuffing or RSTn
            while True:
                nxt = data.find(b"\xff", pos)
                if nxt < 0 or nxt + 1 >= n:
                    raise FormatError(f"truncated JPEG: scan data starting at byte {pos} has no end marker")
                follow = data[nxt + 1]
                if follow == 0x00 or 0xD0 <= follow <= 0xD7 or follow == 0xFF:
                    pos = nxt + 1 if follow == 0xFF else nxt + 2
                    continue
                pos = nxt
                break


def decode_jpeg(data: bytes) -> np.ndarray:
    _check_jpeg(data)
    from PIL import Image

    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except Exception as exc:  # Pillow raises a variety of types
        raise FormatError(f"undecodable JPEG stream (byte 0): {exc}") from None


def decode_raster(data: bytes) -> np.ndarray:
    """Decode PNG or JPEG bytes into ``(h, w, 3)`` uint8 pixels."""
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data)
    if data[:2] == b"\xff\xd8":
        return decode_jpeg(data)
    raise FormatError("unrecognised raster signature at byte 0")


def encode_raster(pixels: np.ndarray, fmt: str = "png") -> bytes:
    if fmt.lower() != "png":
        raise FormatError(f"encoding to {fmt!r} is not supported; only PNG is written")
    return encode_png(pixels)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_raster(fh.read())


def write_png(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(pixels))
