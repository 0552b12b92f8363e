"""Distortion simulators (lateral chromatic aberration, Moire) and test charts."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FactorOutOfRange, ImageTooSmall, InvalidSpec, ShiftTooLarge
from .imaging import PATCH_SIZE, as_image

LCA = "lca"
MOIRE = "moire"
KINDS = (LCA, MOIRE)

MAIN_DIAGONAL = "main"
ANTI_DIAGONAL = "anti"
DIRECTIONS = (MAIN_DIAGONAL, ANTI_DIAGONAL)

# level laws used when drawing training pairs
LEVEL_RANGE = {LCA: (1.0, 5.0), MOIRE: (1.5, 10.0)}

PATTERN_KINDS = ("bars", "net", "star", "wedge", "rings")

BICUBIC_A = -0.5


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: float
    direction: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown distortion kind {self.kind!r}")
        if self.kind == LCA:
            if self.level < 0:
                raise InvalidSpec("LCA shift must be >= 0")
            if self.direction is None:
                object.__setattr__(self, "direction", MAIN_DIAGONAL)
            if self.direction not in DIRECTIONS:
                raise InvalidSpec(f"unknown diagonal {self.direction!r}")
        elif self.level < 1:
            raise InvalidSpec("Moire resize factor must be >= 1")


@dataclass(frozen=True)
class PatternSpec:
    """Analytic repetitive chart.

    ``period`` is in pixels (bars, net, rings, wedge start); ``period_end`` is
    the far-side period of a wedge; ``spokes`` is the Siemens star cycle count.
    """

    kind: str
    size: int = 320
    period: float = 8.0
    period_end: float | None = None
    spokes: int = 36
    contrast: float = 1.0
    orientation: float = 0.0


# -- lateral chromatic aberration -------------------------------------------


def _bilinear_shift(channel: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate a channel by (dx, dy): out(x, y) = in(x - dx, y - dy), clamped."""
    h, w = channel.shape
    sx = np.clip(np.arange(w) - dx, 0, w - 1)
    sy = np.clip(np.arange(h) - dy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # separable: interpolate along x, then along y
    rows0 = channel[y0]
    rows1 = channel[y1]
    top = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def simulate_lca(img, shift: float, direction: str = MAIN_DIAGONAL) -> np.ndarray:
    """Shift red by +s and blue by -s along a diagonal; green stays put."""
    img = as_image(img)
    h, w = img.shape[:2]
    if shift < 0:
        raise ShiftTooLarge("shift must be non-negative")
    if shift > min(w, h) / 4:
        raise ShiftTooLarge(f"shift {shift} exceeds a quarter of {w}x{h}")
    if direction not in DIRECTIONS:
        raise InvalidSpec(f"unknown diagonal {direction!r}")
    out = img.copy()
    if shift == 0:
        return out
    sy = shift if direction == MAIN_DIAGONAL else -shift
    out[:, :, 0] = _bilinear_shift(img[:, :, 0], shift, sy)
    out[:, :, 2] = _bilinear_shift(img[:, :, 2], -shift, -sy)
    return out


# -- bicubic resampling / Moire ---------------------------------------------


def keys_kernel(t, a: float = BICUBIC_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) point-sampled bicubic interpolation matrix.

    Pixel centres are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``) and
    the kernel is never widened, so downscaling does not low-pass the input.
    Out-of-range taps are clamped to the edge.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.intp)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        wts = keys_kernel(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wts)
    return mat


def resize_bicubic(img: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = img.shape[:2]
    my = resample_matrix(h, height)
    mx = resample_matrix(w, width)
    return np.einsum("ij,jkc,lk->ilc", my, img, mx, optimize=True)


def simulate_moire(img, factor: float) -> np.ndarray:
    """Unfiltered bicubic downscale by ``factor`` and back to the input size."""
    img = as_image(img)
    if not (factor >= 1) or not math.isfinite(factor):
        raise FactorOutOfRange(f"resize factor must be >= 1, got {factor}")
    h, w = img.shape[:2]
    small_w = int(math.floor(w / factor))
    small_h = int(math.floor(h / factor))
    if min(small_w, small_h) < PATCH_SIZE:
        raise ImageTooSmall(f"{w}x{h} image is too small for factor {factor}")
    if factor == 1:
        return img.copy()
    small = resize_bicubic(img, small_w, small_h)
    return np.clip(resize_bicubic(small, w, h), 0.0, 1.0)


def apply(spec: DistortionSpec, img) -> np.ndarray:
    if spec.kind == LCA:
        return simulate_lca(img, spec.level, spec.direction)
    return simulate_moire(img, spec.level)


# -- synthetic charts -------------------------------------------------------


def _square(phase: np.ndarray) -> np.ndarray:
    """1 on the first half of each unit cycle, 0 on the second."""
    return (np.mod(phase, 1.0) < 0.5).astype(np.float64)


def validate_pattern(spec: PatternSpec) -> None:
    if spec.kind not in PATTERN_KINDS:
        raise InvalidSpec(f"unknown pattern kind {spec.kind!r}")
    if spec.size < 64:
        raise InvalidSpec(f"pattern size must be >= 64, got {spec.size}")
    if not 0 < spec.contrast <= 1:
        raise InvalidSpec("contrast must be in (0, 1]")
    if spec.kind == "star":
        if spec.spokes < 4:
            raise InvalidSpec("a Siemens star needs at least 4 spokes")
        # local frequency at the rim must be representable
        if spec.spokes / (math.pi * spec.size) > 0.5:
            raise InvalidSpec("too many spokes for this size")
        return
    periods = [spec.period]
    if spec.kind == "wedge":
        periods.append(spec.period if spec.period_end is None else spec.period_end)
    if min(periods) < 2:
        raise InvalidSpec(f"period {min(periods)} px is above Nyquist (0.5 cycles/px)")


def generate_pattern(spec: PatternSpec, seed: int = 0) -> np.ndarray:
    """Render a grayscale-replicated chart; ``seed`` picks the phase offset."""
    validate_pattern(spec)
    rng = np.random.default_rng(seed)
    phase0 = rng.uniform(0.0, 1.0)
    n = spec.size
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cos_t, sin_t = math.cos(spec.orientation), math.sin(spec.orientation)
    u = xx * cos_t + yy * sin_t
    v = -xx * sin_t + yy * cos_t

    if spec.kind == "bars":
        wave = _square(u / spec.period + phase0)
    elif spec.kind == "net":
        wave = _square(u / spec.period + phase0) * _square(v / spec.period + phase0)
    elif spec.kind == "star":
        angle = np.arctan2(yy - c, xx - c)
        wave = _square(spec.spokes * angle / (2 * math.pi) + phase0)
    elif spec.kind == "wedge":
        p1 = spec.period if spec.period_end is None else spec.period_end
        vmin, vmax = v.min(), v.max()
        period = spec.period + (p1 - spec.period) * (v - vmin) / (vmax - vmin)
        wave = _square((u - u.min()) / period + phase0)
    else:  # rings
        r = np.hypot(xx - c, yy - c)
        wave = _square(r / spec.period + phase0)

    gray = 0.5 + spec.contrast * (wave - 0.5)
    return np.repeat(gray[:, :, None], 3, axis=2)


def sample_pattern_spec(rng: np.random.Generator, size: int = 320) -> PatternSpec:
    """Draw a chart whose energy sits near Nyquist so resizing aliases it."""
    kind = PATTERN_KINDS[int(rng.integers(len(PATTERN_KINDS)))]
    lo, hi = math.log(2.5), math.log(16.0)
    period = float(math.exp(rng.uniform(lo, hi)))
    period_end = float(math.exp(rng.uniform(lo, hi)))
    spokes = int(rng.integers(16, 73))
    contrast = float(rng.uniform(0.4, 1.0))
    orientation = float(rng.uniform(0.0, math.pi))
    return PatternSpec(
        kind=kind,
        size=size,
        period=period,
        period_end=period_end if kind == "wedge" else None,
        spokes=spokes,
        contrast=contrast,
        orientation=orientation,
    )


def dead_leaves(size: int, rng: np.random.Generator, n_shapes: int = 120) -> np.ndarray:
    """Occluding random discs and rectangles over a smooth backdrop.

    Used as a stand-in for photographic LCA base images: lots of isolated,
    high-contrast edges at every orientation.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    g0, g1 = rng.uniform(0.2, 0.8, size=2)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(angle) + yy * math.sin(angle)) / size
    img = np.repeat((g0 + (g1 - g0) * (ramp - ramp.min()))[:, :, None], 3, axis=2)
    for _ in range(n_shapes):
        rmax = size / 6
        r = rmax * rng.uniform(0.05, 1.0) ** 2 + 2
        cx, cy = rng.uniform(-r, size + r, size=2)
        lum = rng.uniform(0.0, 1.0)
        tint = rng.uniform(-0.25, 0.25, size=3)
        color = np.clip(lum + tint, 0.0, 1.0)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            a = rng.uniform(0, math.pi)
            du = (xx - cx) * math.cos(a) + (yy - cy) * math.sin(a)
            dv = -(xx - cx) * math.sin(a) + (yy - cy) * math.cos(a)
            mask = (np.abs(du) <= r) & (np.abs(dv) <= r * rng.uniform(0.3, 1.0))
        img[mask] = color
    return img
