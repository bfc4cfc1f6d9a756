"""Image decoding and the deterministic preprocessing primitives.

Decoders cover exactly what the cell crops need: uncompressed BMP (8-bit
palettized or 24-bit) and 8-bit grayscale/RGB non-interlaced PNG. Anything
else is rejected with a specific error rather than decoded approximately.

Planes are plain 2-D ``float64`` arrays indexed ``[row, col]``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, CropLargerThanImage, UnsupportedFormat, UnsupportedVariant

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class ImageBuffer:
    """8-bit raster, ``pixels`` shaped ``(height, width, channels)``."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{(self.height, self.width, self.channels)}"
            )

    @classmethod
    def from_array(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, np.ascontiguousarray(arr))

    @property
    def data(self) -> np.ndarray:
        """Row-major interleaved samples as a flat ``uint8`` vector."""
        return self.pixels.reshape(-1)


def decode_image(raw: bytes) -> ImageBuffer:
    if len(raw) == 0:
        raise CorruptFile("empty input")
    if raw[:2] == b"BM":
        return _decode_bmp(raw)
    if raw[:8] == PNG_SIGNATURE:
        return _decode_png(raw)
    raise UnsupportedFormat("input is neither BMP nor PNG (bad magic)")


def read_image(path) -> ImageBuffer:
    return decode_image(Path(path).read_bytes())


# -- BMP ------------------------------------------------------------------

def _decode_bmp(raw: bytes) -> ImageBuffer:
    if len(raw) < 54:
        raise CorruptFile("BMP shorter than its headers")
    (offset,) = struct.unpack_from("<I", raw, 10)
    (dib_size,) = struct.unpack_from("<I", raw, 14)
    if dib_size < 40:
        raise UnsupportedVariant(f"BMP core header (size {dib_size}) not supported")
    width, height, planes, bpp, compression = struct.unpack_from("<iiHHI", raw, 18)
    (colors_used,) = struct.unpack_from("<I", raw, 46)
    if compression != 0:
        raise UnsupportedVariant(f"BMP compression {compression} not supported")
    if bpp not in (8, 24):
        raise UnsupportedVariant(f"BMP bit depth {bpp} not supported")
    if width < 1 or height == 0:
        raise CorruptFile("BMP has empty dimensions")
    top_down = height < 0
    height = abs(height)

    stride = ((bpp * width + 31) // 32) * 4
    row_bytes = width * bpp // 8
    if offset + stride * (height - 1) + row_bytes > len(raw):
        raise CorruptFile("BMP pixel array truncated")
    padded = raw[offset:offset + stride * height]
    if len(padded) < stride * height:
        padded = padded + bytes(stride * height - len(padded))
    rows = np.frombuffer(padded, dtype=np.uint8).reshape(height, stride)[:, :row_bytes]
    if not top_down:
        rows = rows[::-1]

    if bpp == 24:
        px = rows.reshape(height, width, 3)[:, :, ::-1]
        return ImageBuffer(width, height, 3, np.ascontiguousarray(px))

    n_colors = colors_used or 256
    pal_start = 14 + dib_size
    if pal_start + 4 * n_colors > offset:
        raise CorruptFile("BMP palette overlaps pixel data")
    palette = np.frombuffer(raw, dtype=np.uint8, count=4 * n_colors, offset=pal_start)
    palette = palette.reshape(n_colors, 4)[:, 2::-1]  # BGRx -> RGB
    if rows.max(initial=0) >= n_colors:
        raise CorruptFile("BMP palette index out of range")
    rgb = palette[rows]
    if np.all(rgb[..., 0] == rgb[..., 1]) and np.all(rgb[..., 1] == rgb[..., 2]):
        return ImageBuffer(width, height, 1, np.ascontiguousarray(rgb[..., :1]))
    return ImageBuffer(width, height, 3, np.ascontiguousarray(rgb))


def encode_bmp(img: ImageBuffer) -> bytes:
    """Serialize as 24-bit (RGB) or 8-bit gray-palette (1 channel) BMP."""
    bpp = 24 if img.channels == 3 else 8
    stride = ((bpp * img.width + 31) // 32) * 4
    n_pal = 256 if bpp == 8 else 0
    offset = 54 + 4 * n_pal
    size = offset + stride * img.height
    header = b"BM" + struct.pack("<IHHI", size, 0, 0, offset)
    dib = struct.pack("<IiiHHIIiiII", 40, img.width, img.height, 1, bpp, 0,
                      stride * img.height, 2835, 2835, n_pal, 0)
    out = bytearray(header + dib)
    if n_pal:
        g = np.arange(256, dtype=np.uint8)
        out += np.stack([g, g, g, np.zeros_like(g)], axis=1).tobytes()
    px = img.pixels[::-1]
    if bpp == 24:
        px = px[:, :, ::-1]
    body = np.zeros((img.height, stride), dtype=np.uint8)
    body[:, : img.width * bpp // 8] = px.reshape(img.height, -1)
    out += body.tobytes()
    return bytes(out)


# -- PNG ------------------------------------------------------------------

def _decode_png(raw: bytes) -> ImageBuffer:
    pos = 8
    header = None
    idat = []
    while True:
        if pos + 12 > len(raw):
            raise CorruptFile("PNG truncated before IEND")
        length, ctype = struct.unpack_from(">I4s", raw, pos)
        end = pos + 8 + length
        if end + 4 > len(raw):
            raise CorruptFile(f"PNG chunk {ctype!r} truncated")
        body = raw[pos + 8:end]
        (crc,) = struct.unpack_from(">I", raw, end)
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise CorruptFile(f"PNG chunk {ctype!r} fails CRC")
        pos = end + 4
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"IEND":
            break
        elif not (ctype[0] & 0x20):
            raise UnsupportedVariant(f"critical PNG chunk {ctype!r} not supported")
    if header is None:
        raise CorruptFile("PNG has no IHDR")
    width, height, depth, color_type, _comp, _filt, interlace = header
    if depth != 8 or color_type not in (0, 2):
        raise UnsupportedVariant(f"PNG bit depth {depth} / color type {color_type} not supported")
    if interlace:
        raise UnsupportedVariant("interlaced PNG not supported")
    if width < 1 or height < 1:
        raise CorruptFile("PNG has empty dimensions")
    channels = 1 if color_type == 0 else 3
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CorruptFile(f"PNG image data does not inflate: {exc}") from None
    row_bytes = width * channels
    if len(data) < height * (row_bytes + 1):
        raise CorruptFile("PNG image data truncated")
    scan = np.frombuffer(data, dtype=np.uint8, count=height * (row_bytes + 1))
    scan = scan.reshape(height, row_bytes + 1)
    out = np.zeros((height, row_bytes), dtype=np.uint8)
    prev = np.zeros(row_bytes, dtype=np.uint8)
    for y in range(height):
        out[y] = _unfilter(int(scan[y, 0]), scan[y, 1:], prev, channels)
        prev = out[y]
    return ImageBuffer(width, height, channels, out.reshape(height, width, channels))


def _unfilter(ftype: int, line: np.ndarray, prev: np.ndarray, bpp: int) -> np.ndarray:
    if ftype == 0:
        return line.copy()
    if ftype == 2:
        return line + prev  # uint8 wraps mod 256
    if ftype == 1:
        acc = line.astype(np.int64).reshape(-1, bpp)
        return (np.cumsum(acc, axis=0) % 256).astype(np.uint8).reshape(-1)
    if ftype not in (3, 4):
        raise CorruptFile(f"PNG filter type {ftype} invalid")
    cur = line.astype(np.int64)
    up = prev.astype(np.int64)
    for i in range(len(cur)):
        left = cur[i - bpp] if i >= bpp else 0
        if ftype == 3:
            pred = (left + up[i]) // 2
        else:
            ul = up[i - bpp] if i >= bpp else 0
            p = left + up[i] - ul
            pa, pb, pc = abs(p - left), abs(p - up[i]), abs(p - ul)
            if pa <= pb and pa <= pc:
                pred = left
            elif pb <= pc:
                pred = up[i]
            else:
                pred = ul
        cur[i] = (cur[i] + pred) & 0xFF
    return cur.astype(np.uint8)


# -- preprocessing --------------------------------------------------------

def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """Rec.601 luma, rounded half away from zero (exact integer arithmetic)."""
    if img.channels == 1:
        return img
    px = img.pixels.astype(np.int64)
    y = (299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2] + 500) // 1000
    return ImageBuffer(img.width, img.height, 1, y.astype(np.uint8)[:, :, None])


def to_plane(img: ImageBuffer) -> np.ndarray:
    """Grayscale samples scaled to [0, 1]."""
    return to_grayscale(img).pixels[:, :, 0].astype(np.float64) / 255.0


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(p: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    p = np.asarray(p, dtype=np.float64)
    h, w = p.shape
    lo, hi, f = _axis_weights(w, out_w)
    a, b = p[:, lo], p[:, hi]
    rows = a + (b - a) * f
    lo, hi, f = _axis_weights(h, out_h)
    a, b = rows[lo], rows[hi]
    return a + (b - a) * f[:, None]


def center_crop(p: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = p.shape
    if out_w > w or out_h > h:
        raise CropLargerThanImage(f"cannot crop {out_w}x{out_h} from {w}x{h}")
    x0 = (w - out_w) // 2
    y0 = (h - out_h) // 2
    return p[y0:y0 + out_h, x0:x0 + out_w].copy()
