"""Binary PNM images, 16-bit label maps, BSDS ``.seg`` files and float rasters.

Only the binary netpbm variants are supported: P5 (gray) and P6 (RGB) with
maxval 255 for images, and P5 with maxval 65535 (big-endian samples) for
label maps.  Float rasters use a small documented container::

    bytes 0-3   magic b"WFR1"
    bytes 4-15  height, width, channels as little-endian uint32
    rest        height*width*channels float64 little-endian, (y, x, c) order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import ShapeError, as_labels

MAX_LABEL = 65535
FLOAT_MAGIC = b"WFR1"


class FormatError(ValueError):
    """Malformed file content; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CoverageError(ValueError):
    """A BSDS segmentation leaves a pixel uncovered or covers it twice."""


def _parse_header(buf: bytes):
    """Return (magic, width, height, maxval, data_offset) of a binary PNM."""
    if len(buf) < 2:
        raise FormatError("file too short for a PNM magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header tokens
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("expected a decimal header field", start)
        fields.append((int(buf[start:pos]), start))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    (width, woff), (height, hoff), (maxval, moff) = fields
    if width <= 0:
        raise FormatError("width must be positive", woff)
    if height <= 0:
        raise FormatError("height must be positive", hoff)
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", moff)
    return magic.decode(), width, height, (maxval, moff), pos


def _read_raster(buf: bytes, offset: int, count: int, dtype) -> np.ndarray:
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - offset < nbytes:
        raise FormatError(
            f"truncated payload: need {nbytes} bytes, found {len(buf) - offset}", len(buf)
        )
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def load_pnm(path) -> np.ndarray:
    """Read a P5/P6 file with maxval 255 into an ``(H, W, C)`` image in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, width, height, (maxval, moff), offset = _parse_header(buf)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", moff)
    channels = 1 if magic == "P5" else 3
    raw = _read_raster(buf, offset, width * height * channels, np.uint8)
    return raw.reshape(height, width, channels).astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """8-bit samples of an image, rounding half up and clipping to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(
        np.uint8
    )


def save_pnm(img, path) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"cannot save empty or non-raster array of shape {arr.shape}")
    channels = arr.shape[2]
    if channels not in (1, 3):
        raise ShapeError(f"PNM supports 1 or 3 channels, got {channels}")
    magic = "P5" if channels == 1 else "P6"
    header = f"{magic}\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + quantize(arr).tobytes())


def load_label_map(path) -> np.ndarray:
    """Read a 16-bit P5 label map."""
    buf = Path(path).read_bytes()
    magic, width, height, (maxval, moff), offset = _parse_header(buf)
    if magic != "P5":
        raise FormatError("label maps must be P5", 0)
    if maxval != MAX_LABEL:
        raise FormatError(f"label maps need maxval {MAX_LABEL}, got {maxval}", moff)
    raw = _read_raster(buf, offset, width * height, ">u2")
    return raw.reshape(height, width).astype(np.int64)


def save_label_map(labels, path) -> None:
    labels = as_labels(labels)
    if labels.size == 0:
        raise ShapeError("cannot save an empty label map")
    if labels.max() > MAX_LABEL:
        raise ValueError(f"label {labels.max()} exceeds the 16-bit capacity {MAX_LABEL}")
    header = f"P5\n{labels.shape[1]} {labels.shape[0]}\n{MAX_LABEL}\n".encode()
    Path(path).write_bytes(header + labels.astype(">u2").tobytes())


def load_bsds_seg(path) -> np.ndarray:
    """Parse a BSDS ``.seg`` text file into a label map.

    Data rows are ``label row col_start col_end`` with inclusive column runs.
    Every pixel must be covered exactly once.
    """
    header = {}
    rows = []
    in_data = False
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if not in_data:
            if parts[0] == "data":
                in_data = True
            elif len(parts) >= 2:
                header[parts[0]] = parts[1]
            continue
        if len(parts) != 4:
            raise FormatError(f"line {lineno}: expected 4 integers, got {line!r}")
        rows.append([int(v) for v in parts])
    try:
        width, height = int(header["width"]), int(header["height"])
    except KeyError as exc:
        raise FormatError(f"missing header field {exc.args[0]!r}") from None
    labels = np.full((height, width), -1, dtype=np.int64)
    for label, r, c0, c1 in rows:
        if not (0 <= r < height and 0 <= c0 <= c1 < width):
            raise CoverageError(f"run ({r}, {c0}..{c1}) lies outside the {height}x{width} image")
        run = labels[r, c0 : c1 + 1]
        if np.any(run >= 0):
            c = c0 + int(np.argmax(run >= 0))
            raise CoverageError(f"pixel (row {r}, col {c}) is covered twice")
        run[:] = label
    if np.any(labels < 0):
        r, c = np.argwhere(labels < 0)[0]
        raise CoverageError(f"pixel (row {r}, col {c}) is not covered")
    return labels


def save_bsds_seg(labels, path) -> None:
    labels = as_labels(labels)
    h, w = labels.shape
    lines = [
        "format ascii cr",
        f"width {w}",
        f"height {h}",
        f"segments {len(np.unique(labels))}",
        "data",
    ]
    for r in range(h):
        row = labels[r]
        starts = np.flatnonzero(np.r_[True, row[1:] != row[:-1]])
        ends = np.r_[starts[1:] - 1, w - 1]
        lines.extend(f"{row[s]} {r} {s} {e}" for s, e in zip(starts, ends))
    Path(path).write_text("\n".join(lines) + "\n")


def save_float_raster(arr, path) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"float raster must be 2-D or 3-D, got shape {arr.shape}")
    head = FLOAT_MAGIC + struct.pack("<3I", *arr.shape)
    Path(path).write_bytes(head + arr.astype("<f8").tobytes())


def load_float_raster(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLOAT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    h, w, c = struct.unpack("<3I", buf[4:16])
    data = _read_raster(buf, 16, h * w * c, "<f8")
    arr = data.reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr

