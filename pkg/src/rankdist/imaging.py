"""Image containers, codecs, error maps and rank statistics.

Images are plain ``float64`` numpy arrays of shape ``(height, width, 3)``
with samples in ``[0, 1]``. Rectangles are ``(x, y, w, h)`` tuples in pixel
coordinates with the origin at the top-left corner.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CorruptData,
    DegenerateInput,
    DimensionMismatch,
    EmptyInput,
    LengthMismatch,
    OutOfBounds,
    UnsupportedFormat,
)

PATCH_SIZE = 32

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class Patch:
    """A 32x32 RGB region cut from a parent image."""

    data: np.ndarray
    source_rect: tuple[int, int, int, int]

    def __post_init__(self):
        if self.data.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise DimensionMismatch(f"patch must be 32x32x3, got {self.data.shape}")
        x, y, w, h = self.source_rect
        if (w, h) != (PATCH_SIZE, PATCH_SIZE) or x < 0 or y < 0:
            raise OutOfBounds(f"invalid patch rect {self.source_rect}")


def as_image(arr) -> np.ndarray:
    """Validate and convert ``arr`` to a float64 (H, W, 3) image."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionMismatch(f"expected (H, W, 3) image, got shape {img.shape}")
    return img


def _from_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0,1] samples to uint8, rounding half away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def _parse_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    channels = 3 if magic == b"P6" else 1
    tokens = []
    pos = 2
    n = len(data)
    while len(tokens) < 3:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptData("truncated PNM header")
        tokens.append(data[start:pos])
    if pos >= n:
        raise CorruptData("truncated PNM header")
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptData(f"bad PNM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise CorruptData(f"bad PNM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit PNM is supported (maxval={maxval})")
    expected = width * height * channels
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise CorruptData(f"PNM raster has {len(raster)} bytes, expected {expected}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return _from_bytes(arr)


def _parse_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode == "L":
                arr = np.repeat(np.asarray(im)[:, :, None], 3, axis=2)
            elif im.mode == "RGB":
                arr = np.asarray(im)
            else:
                raise UnsupportedFormat(f"unsupported PNG mode {im.mode!r}")
    except UnsupportedFormat:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptData(f"cannot decode PNG: {exc}") from None
    return _from_bytes(arr)


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM/PGM file into a float image."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    data = path.read_bytes()
    if data.startswith(_PNG_MAGIC):
        return _parse_png(data)
    if data[:2] in (b"P6", b"P5"):
        return _parse_pnm(data)
    if len(data) < 2:
        raise CorruptData(f"{path}: file too short")
    raise UnsupportedFormat(f"{path}: not a PNG or binary PPM file")


def save_image(img: np.ndarray, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    q = quantize(as_image(img))
    if fmt == "png":
        buf = io.BytesIO()
        Image.fromarray(q, mode="RGB").save(buf, format="PNG")
        payload = buf.getvalue()
    elif fmt in ("ppm", "pnm"):
        h, w = q.shape[:2]
        payload = f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
    else:
        raise UnsupportedFormat(f"unknown output format {fmt!r}")
    with open(path, "wb") as fh:
        fh.write(payload)


def error_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel channel-max absolute difference of two registered images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot compare {a.shape} with {b.shape}")
    return np.abs(a - b).max(axis=2)


def check_rect(shape, rect) -> None:
    x, y, w, h = rect
    height, width = shape[:2]
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise OutOfBounds(f"rect {tuple(rect)} outside {width}x{height} image")


def crop(img: np.ndarray, rect) -> np.ndarray:
    check_rect(img.shape, rect)
    x, y, w, h = rect
    return img[y : y + h, x : x + w].copy()


def extract_patch(img: np.ndarray, rect) -> Patch:
    return Patch(crop(img, rect), tuple(int(v) for v in rect))


def average_ranks(values) -> np.ndarray:
    """Ascending 1-based ranks; tied values share the mean of their ranks."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("cannot rank an empty sequence")
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], v.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(v.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of two rank vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"rank vectors differ in length ({x.size} vs {y.size})")
    if x.size < 2:
        raise LengthMismatch("need at least two ranked items")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("rank vector has zero variance")
    rho = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho)))


def list_images(directory) -> list[Path]:
    exts = {".png", ".ppm", ".pnm", ".pgm"}
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in exts and p.is_file())


def threads() -> int:
    """Worker cap from RANKDIST_THREADS, defaulting to the CPU count."""
    cap = os.environ.get("RANKDIST_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            pass
    return n
