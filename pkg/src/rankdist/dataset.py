"""Ordered-pair corpus construction: level sampling, ROI selection, manifests."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distortion as dist
from .distortion import DistortionSpec, PatternSpec
from .errors import (
    EmptyInput,
    ImageTooSmall,
    ManifestError,
    NoQualifyingRoi,
)
from .imaging import PATCH_SIZE, Patch, as_image, crop, error_map, load_image, save_image, threads

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
MIN_LEVEL_GAP = 0.25
ROI_STRIDE = 16
ROI_TAU = 2.0 / 255.0
ROI_AREA_FRACTION = 0.025 / 100.0
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class OrderedPair:
    """Registered ROI pair; ``patch_a`` is the less distorted one."""

    patch_a: Patch
    patch_b: Patch
    spec_a: DistortionSpec
    spec_b: DistortionSpec
    source_id: str = ""
    roi_rect: tuple[int, int, int, int] = (0, 0, PATCH_SIZE, PATCH_SIZE)


@dataclass(frozen=True)
class Source:
    """A corpus source: either a base image or a chart to be rendered."""

    source_id: str
    image: np.ndarray | None = None
    pattern: PatternSpec | None = None


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def source_rng(seed: int, source_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), stable_hash(source_id)]))


def split_for(source_id: str) -> str:
    bucket = stable_hash(source_id) % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


# -- pair sampling ----------------------------------------------------------


def draw_levels(kind: str, rng) -> tuple[float, float]:
    lo, hi = dist.LEVEL_RANGE[kind]
    while True:
        l1 = float(rng.uniform(lo, hi))
        l2 = float(rng.uniform(lo, hi))
        if abs(l1 - l2) >= MIN_LEVEL_GAP:
            return min(l1, l2), max(l1, l2)


def make_ordered_images(base, kind: str, rng):
    """Two distorted copies of ``base`` ordered from less to more distorted."""
    base = as_image(base)
    level_a, level_b = draw_levels(kind, rng)
    direction = None
    if kind == dist.LCA:
        direction = dist.DIRECTIONS[int(rng.integers(2))]
    spec_a = DistortionSpec(kind, level_a, direction)
    spec_b = DistortionSpec(kind, level_b, direction)
    return dist.apply(spec_a, base), dist.apply(spec_b, base), spec_a, spec_b


# -- ROI selection ----------------------------------------------------------


def window_origins(width: int, height: int, size: int = PATCH_SIZE, stride: int = ROI_STRIDE):
    xs = np.arange(0, width - size + 1, stride)
    ys = np.arange(0, height - size + 1, stride)
    return xs, ys


def select_rois(emap: np.ndarray, max_rois: int, tau: float = ROI_TAU,
                area_fraction: float = ROI_AREA_FRACTION) -> list[tuple[int, int, int, int]]:
    """Greedy non-overlapping 32x32 windows over an error map, best first."""
    if max_rois < 1:
        raise ValueError("max_rois must be >= 1")
    height, width = emap.shape
    if width < PATCH_SIZE or height < PATCH_SIZE:
        raise ImageTooSmall(f"{width}x{height} map is smaller than one ROI")
    xs, ys = window_origins(width, height)
    s = PATCH_SIZE
    view = np.lib.stride_tricks.sliding_window_view
    scores = view(emap, (s, s))[ys][:, xs].sum(axis=(-2, -1))
    support = view(emap > tau, (s, s))[ys][:, xs].sum(axis=(-2, -1))
    needed = area_fraction * width * height

    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    flat_score = scores.ravel()
    order = np.lexsort((gx.ravel(), gy.ravel(), -flat_score))
    chosen: list[tuple[int, int, int, int]] = []
    for k in order:
        if support.ravel()[k] <= needed:
            continue
        x, y = int(gx.ravel()[k]), int(gy.ravel()[k])
        if any(abs(x - cx) < s and abs(y - cy) < s for cx, cy, _, _ in chosen):
            continue
        chosen.append((x, y, s, s))
        if len(chosen) == max_rois:
            break
    if not chosen:
        raise NoQualifyingRoi("no window carries enough distortion")
    return chosen


def extract_rois(img_a, img_b, max_rois: int) -> list[tuple[int, int, int, int]]:
    return select_rois(error_map(img_a, img_b), max_rois)


# -- manifests --------------------------------------------------------------


@dataclass
class ManifestEntry:
    source_id: str
    kind: str
    level_a: float
    level_b: float
    rect: tuple[int, int, int, int]
    patch_a_path: str
    patch_b_path: str
    split: str
    direction: str | None = None

    def to_json(self) -> dict:
        out = {"source_id": self.source_id, "kind": self.kind,
               "level_a": self.level_a, "level_b": self.level_b}
        if self.direction is not None:
            out["direction"] = self.direction
        out.update(rect=list(self.rect), patch_a_path=self.patch_a_path,
                   patch_b_path=self.patch_b_path, split=self.split)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        rect = tuple(int(v) for v in obj["rect"])
        if len(rect) != 4:
            raise ValueError("rect must have four integers")
        return cls(
            source_id=str(obj["source_id"]),
            kind=str(obj["kind"]),
            level_a=float(obj["level_a"]),
            level_b=float(obj["level_b"]),
            rect=rect,
            patch_a_path=str(obj["patch_a_path"]),
            patch_b_path=str(obj["patch_b_path"]),
            split=str(obj["split"]),
            direction=obj.get("direction"),
        )


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    kind: str
    entries: list[ManifestEntry] = field(default_factory=list)
    skipped: int = 0

    @property
    def counts(self) -> dict:
        c = {s: 0 for s in SPLITS}
        for e in self.entries:
            c[e.split] += 1
        c["total"] = len(self.entries)
        c["skipped"] = self.skipped
        return c

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        header = {"version": MANIFEST_VERSION, "seed": self.seed, "kind": self.kind,
                  "counts": {self.kind: self.counts}}
        lines = [json.dumps(header)] + [json.dumps(e.to_json()) for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no manifest at {path}")
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ManifestError("empty manifest", line=1)
        try:
            header = json.loads(lines[0])
            version = header["version"]
            seed, kind = int(header["seed"]), str(header["kind"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"bad header: {exc}", line=1) from None
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version}", line=1)
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"bad entry: {exc}", line=lineno) from None
        skipped = int(header.get("counts", {}).get(kind, {}).get("skipped", 0))
        return cls(root=path.parent, seed=seed, kind=kind, entries=entries, skipped=skipped)

    def load_patches(self, split: str, dtype=np.float32):
        """Stacked (xa, xb, level_a, level_b) arrays for one split."""
        entries = self.split(split)
        n = len(entries)
        xa = np.empty((n, PATCH_SIZE, PATCH_SIZE, 3), dtype=dtype)
        xb = np.empty_like(xa)
        for i, e in enumerate(entries):
            xa[i] = load_image(self.root / e.patch_a_path)
            xb[i] = load_image(self.root / e.patch_b_path)
        la = np.array([e.level_a for e in entries])
        lb = np.array([e.level_b for e in entries])
        return xa, xb, la, lb

    def pairs(self, split: str) -> list[OrderedPair]:
        out = []
        for e in self.split(split):
            pa = Patch(load_image(self.root / e.patch_a_path), e.rect)
            pb = Patch(load_image(self.root / e.patch_b_path), e.rect)
            out.append(OrderedPair(pa, pb, DistortionSpec(e.kind, e.level_a, e.direction),
                                   DistortionSpec(e.kind, e.level_b, e.direction),
                                   e.source_id, e.rect))
        return out


def _source_image(src: Source, rng: np.random.Generator) -> np.ndarray:
    if src.image is not None:
        return as_image(src.image)
    if src.pattern is None:
        raise ValueError(f"source {src.source_id!r} has neither image nor pattern")
    return dist.generate_pattern(src.pattern, seed=int(rng.integers(2**31)))


def _process_source(src: Source, kind, pairs_per_source, max_rois, seed, patch_dir):
    rng = source_rng(seed, src.source_id)
    base = _source_image(src, rng)
    split = split_for(src.source_id)
    entries = []
    skipped = 0
    roi_idx = 0
    for _ in range(pairs_per_source):
        img_a, img_b, spec_a, spec_b = make_ordered_images(base, kind, rng)
        try:
            rects = extract_rois(img_a, img_b, max_rois)
        except NoQualifyingRoi:
            skipped += 1
            continue
        for rect in rects:
            name_a = f"{src.source_id}_{roi_idx}_a.png"
            name_b = f"{src.source_id}_{roi_idx}_b.png"
            save_image(crop(img_a, rect), patch_dir / name_a)
            save_image(crop(img_b, rect), patch_dir / name_b)
            entries.append(ManifestEntry(
                source_id=src.source_id, kind=kind,
                level_a=spec_a.level, level_b=spec_b.level, rect=rect,
                patch_a_path=f"{patch_dir.name}/{name_a}",
                patch_b_path=f"{patch_dir.name}/{name_b}",
                split=split, direction=spec_a.direction,
            ))
            roi_idx += 1
    return entries, skipped


def build_corpus(sources, kind: str, pairs_per_source: int, max_rois: int, seed: int,
                 out_dir, workers: int | None = None) -> CorpusManifest:
    """Simulate ordered pairs for every source and persist patches + manifest.

    Each source draws from its own generator seeded by (seed, source_id), so
    the result does not depend on worker scheduling.
    """
    sources = list(sources)
    if not sources:
        raise EmptyInput("no sources given")
    ids = [s.source_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError("source ids must be unique")
    if kind not in dist.KINDS:
        raise ValueError(f"unknown distortion kind {kind!r}")
    out_dir = Path(out_dir)
    patch_dir = out_dir / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)

    def work(src):
        return src.source_id, _process_source(src, kind, pairs_per_source, max_rois, seed, patch_dir)

    workers = workers or threads()
    if workers > 1 and len(sources) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, sources))
    else:
        results = [work(s) for s in sources]

    manifest = CorpusManifest(root=out_dir, seed=seed, kind=kind)
    for _, (entries, skipped) in sorted(results, key=lambda r: r[0]):
        manifest.entries.extend(entries)
        manifest.skipped += skipped
    if manifest.skipped:
        log.warning("%d image pairs had no qualifying ROI and were skipped", manifest.skipped)
    manifest.write()
    return manifest


def validate_manifest(manifest: CorpusManifest) -> list[str]:
    """Re-check manifest invariants; returns a list of problems (empty if clean)."""
    problems = []
    split_of: dict[str, str] = {}
    for i, e in enumerate(manifest.entries):
        if not e.level_a < e.level_b:
            problems.append(f"entry {i}: levels not ordered")
        prev = split_of.setdefault(e.source_id, e.split)
        if prev != e.split:
            problems.append(f"entry {i}: source {e.source_id} spans splits")
        try:
            a = load_image(manifest.root / e.patch_a_path)
            b = load_image(manifest.root / e.patch_b_path)
        except (OSError, ValueError) as exc:
            problems.append(f"entry {i}: {exc}")
            continue
        if a.shape != (PATCH_SIZE, PATCH_SIZE, 3) or b.shape != a.shape:
            problems.append(f"entry {i}: patch is not 32x32x3")
        elif not error_map(a, b).any():
            problems.append(f"entry {i}: patches are identical")
    return problems
