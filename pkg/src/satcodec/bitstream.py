"""Byte formats: compressed-image container, multi-tile container, weights file and PPM.

All multi-byte integers are little-endian.

Image container ("CSMC")::

    magic[4] version:u8 width:u32 height:u32 lambda_index:u8
    meta_count:u8 meta:f64[meta_count]
    hyper_len:u32 hyper[hyper_len] main_len:u32 main[main_len]

Tile container ("CSMT")::

    magic[4] version:u8 width:u32 height:u32 tile_size:u32 rows:u16 cols:u16
    tile_count:u32 then per tile (row-major): length:u32 + one CSMC stream

Weights file ("CSMW")::

    magic[4] version:u8 count:u32 then per tensor:
    name_len:u16 name[utf-8] rank:u8 extents:u32[rank] data:f32[prod(extents)]
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .metadata import FIELDS, MetadataError, MetadataRecord, parse_metadata  # noqa: F401  (re-export)

IMAGE_MAGIC = b"CSMC"
TILE_MAGIC = b"CSMT"
WEIGHTS_MAGIC = b"CSMW"
VERSION = 1
NUM_LAMBDAS = 4
CONFIG_TENSOR = "__config__"


class BitstreamError(ValueError):
    """Base class; ``category`` is a short machine-readable tag."""

    category = "bitstream"


class BadMagicError(BitstreamError):
    category = "bad-magic"


class UnsupportedVersionError(BitstreamError):
    category = "version"


class TruncatedError(BitstreamError):
    category = "truncated"


class LengthMismatchError(BitstreamError):
    category = "length"


class TrailingDataError(BitstreamError):
    category = "trailing"


class FieldRangeError(BitstreamError):
    category = "field-range"


class ImageFormatError(BitstreamError):
    category = "image-format"


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated while reading {what}: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals[0] if len(vals) == 1 else vals

    def payload(self, what: str) -> bytes:
        n = self.unpack("I", f"{what} length")
        if n > len(self.data) - self.pos:
            raise LengthMismatchError(f"{what} declares {n} bytes but only {len(self.data) - self.pos} remain")
        return self.take(n, what)

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise BadMagicError(f"bad magic {got!r}, expected {expected!r}")

    def version(self) -> int:
        v = self.unpack("B", "version")
        if v != VERSION:
            raise UnsupportedVersionError(f"unsupported version {v} (this build reads {VERSION})")
        return v

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise TrailingDataError(f"{len(self.data) - self.pos} trailing bytes")


def _u32(value: int, name: str) -> int:
    if not 0 <= int(value) < 1 << 32:
        raise FieldRangeError(f"{name}={value} does not fit in u32")
    return int(value)


@dataclass
class Bitstream:
    width: int
    height: int
    lambda_index: int
    metadata: tuple[float, ...]
    hyper: bytes = b""
    main: bytes = b""
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return len(self.hyper) + len(self.main)

    @property
    def header_bytes(self) -> int:
        return 4 + 1 + 4 + 4 + 1 + 1 + 8 * len(self.metadata) + 4 + 4

    def record(self) -> MetadataRecord:
        return MetadataRecord.from_values(self.metadata)


def write_bitstream(bs: Bitstream) -> bytes:
    if not 1 <= bs.width < 1 << 32 or not 1 <= bs.height < 1 << 32:
        raise FieldRangeError(f"image size {bs.width}x{bs.height} out of range")
    if not 0 <= bs.lambda_index < NUM_LAMBDAS:
        raise FieldRangeError(f"lambda_index {bs.lambda_index} not in [0, {NUM_LAMBDAS})")
    meta = [float(v) for v in bs.metadata]
    if len(meta) > 255:
        raise FieldRangeError("more than 255 metadata values")
    if not all(math.isfinite(v) for v in meta):
        raise FieldRangeError("metadata values must be finite")
    out = bytearray(IMAGE_MAGIC)
    out += struct.pack("<BIIBB", VERSION, bs.width, bs.height, bs.lambda_index, len(meta))
    out += struct.pack(f"<{len(meta)}d", *meta)
    out += struct.pack("<I", _u32(len(bs.hyper), "hyper length")) + bs.hyper
    out += struct.pack("<I", _u32(len(bs.main), "main length")) + bs.main
    return bytes(out)


def read_bitstream(data: bytes) -> Bitstream:
    r = _Reader(data)
    r.magic(IMAGE_MAGIC)
    version = r.version()
    width, height, lam, count = r.unpack("IIBB", "header")
    if width == 0 or height == 0:
        raise FieldRangeError(f"image size {width}x{height} is empty")
    if lam >= NUM_LAMBDAS:
        raise FieldRangeError(f"lambda_index {lam} not in [0, {NUM_LAMBDAS})")
    if count not in (0, len(FIELDS)):
        raise FieldRangeError(f"metadata count {count}; expected 0 or {len(FIELDS)}")
    meta = r.unpack(f"{count}d", "metadata") if count else ()
    meta = (meta,) if isinstance(meta, float) else tuple(meta)
    if not all(math.isfinite(v) for v in meta):
        raise FieldRangeError("non-finite metadata value")
    hyper = r.payload("hyper payload")
    main = r.payload("main payload")
    r.finish()
    return Bitstream(width, height, lam, meta, hyper, main, version)


@dataclass
class TileStream:
    width: int
    height: int
    tile_size: int
    rows: int
    cols: int
    tiles: list[bytes] = field(default_factory=list)


def write_tile_stream(ts: TileStream) -> bytes:
    if len(ts.tiles) != ts.rows * ts.cols:
        raise FieldRangeError(f"{len(ts.tiles)} tiles for a {ts.rows}x{ts.cols} layout")
    if not (0 < ts.rows < 1 << 16 and 0 < ts.cols < 1 << 16):
        raise FieldRangeError("tile grid must be 1..65535 per side")
    out = bytearray(TILE_MAGIC)
    out += struct.pack("<BIIIHHI", VERSION, _u32(ts.width, "width"), _u32(ts.height, "height"),
                       _u32(ts.tile_size, "tile_size"), ts.rows, ts.cols, len(ts.tiles))
    for t in ts.tiles:
        out += struct.pack("<I", _u32(len(t), "tile length")) + t
    return bytes(out)


def read_tile_stream(data: bytes) -> TileStream:
    r = _Reader(data)
    r.magic(TILE_MAGIC)
    r.version()
    width, height, size, rows, cols, count = r.unpack("IIIHHI", "tile header")
    if count != rows * cols:
        raise LengthMismatchError(f"{count} tiles declared for a {rows}x{cols} grid")
    if size == 0 or rows * size > height or cols * size > width:
        raise FieldRangeError(f"{rows}x{cols} tiles of {size} do not fit {width}x{height}")
    tiles = [r.payload(f"tile {i}") for i in range(count)]
    r.finish()
    return TileStream(width, height, size, rows, cols, tiles)


def container_kind(data: bytes) -> str:
    head = bytes(data[:4])
    if head == IMAGE_MAGIC:
        return "image"
    if head == TILE_MAGIC:
        return "tiles"
    raise BadMagicError(f"unrecognized container magic {head!r}")


# ---------------------------------------------------------------------------
# weights


def save_weights(tensors: dict[str, np.ndarray], config: dict | None = None) -> bytes:
    """Serialize named float32 tensors; ``config`` is stored as UTF-8 JSON byte values in one tensor."""
    items = dict(tensors)
    if config is not None:
        raw = json.dumps(config, sort_keys=True).encode()
        items[CONFIG_TENSOR] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    out = bytearray(WEIGHTS_MAGIC)
    out += struct.pack("<BI", VERSION, len(items))
    for name in sorted(items):
        arr = np.asarray(items[name])
        if not np.all(np.isfinite(arr)):
            raise FieldRangeError(f"tensor {name!r} has non-finite values")
        arr = np.asarray(arr, dtype="<f4").copy(order="C")
        key = name.encode()
        if len(key) >= 1 << 16 or arr.ndim > 255:
            raise FieldRangeError(f"tensor {name!r}: name or rank too large")
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *(_u32(n, "extent") for n in arr.shape))
        out += arr.tobytes()
    return bytes(out)


def load_weights(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    r = _Reader(data)
    r.magic(WEIGHTS_MAGIC)
    r.version()
    count = r.unpack("I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        n = r.unpack("H", "name length")
        try:
            name = r.take(n, "tensor name").decode()
        except UnicodeDecodeError as exc:
            raise FieldRangeError("tensor name is not UTF-8") from exc
        if name in tensors:
            raise FieldRangeError(f"duplicate tensor {name!r}")
        rank = r.unpack("B", "rank")
        shape = r.unpack(f"{rank}I", "extents") if rank else ()
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        nbytes = 4 * math.prod(shape)
        if nbytes > len(r.data) - r.pos:
            raise TruncatedError(f"tensor {name!r} needs {nbytes} bytes")
        tensors[name] = np.frombuffer(r.take(nbytes, name), dtype="<f4").reshape(shape).astype(np.float32)
    r.finish()
    config = None
    if CONFIG_TENSOR in tensors:
        raw = tensors.pop(CONFIG_TENSOR)
        try:
            config = json.loads(raw.astype(np.uint8).tobytes().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FieldRangeError("corrupt embedded config") from exc
    return tensors, config


# ---------------------------------------------------------------------------
# PPM


_PPM_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_ppm(data: bytes) -> np.ndarray:
    """Binary 8-bit P6 -> float32 array (3, H, W) in [0, 1]."""
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ImageFormatError("not a binary P6 pixmap (malformed header)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported (only 255)")
    if w == 0 or h == 0:
        raise ImageFormatError("empty image")
    body = data[m.end():]
    if len(body) != 3 * w * h:
        raise ImageFormatError(f"pixel data has {len(body)} bytes, expected {3 * w * h}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8 with round-half-to-even re-quantization."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) image, got {image.shape}")
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray) -> bytes:
    pix = to_uint8(image)
    h, w = pix.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes()
