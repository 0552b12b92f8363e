"""Pairwise ordering, set ranking by median patch rank, and accuracy harnesses.

A *scorer* is anything with a ``score(batch) -> scores`` method taking an
``(N, 32, 32, 3)`` array, such as :class:`rankdist.model.ScorerModel`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import select_rois
from .errors import (
    DegenerateInput,
    DegenerateMatrix,
    DimensionMismatch,
    EmptyInput,
    EmptyRois,
    InsufficientImages,
    LengthMismatch,
    NoQualifyingRoi,
)
from .imaging import PATCH_SIZE, as_image, average_ranks, crop, error_map, spearman

FIRST_LESS = "first_less"
SECOND_LESS = "second_less"
TIE = "tie"

A_LESS = "A_less_distorted"
B_LESS = "B_less_distorted"

TIE_TOLERANCE = 1e-9
MAX_CROP_ATTEMPTS = 20


def _data(patch):
    return patch.data if hasattr(patch, "data") else np.asarray(patch)


def _compare(sa: float, sb: float) -> str:
    if abs(sa - sb) <= TIE_TOLERANCE:
        return TIE
    return FIRST_LESS if sa < sb else SECOND_LESS


def order_patch_pair(scorer, r_a, r_b) -> str:
    s = np.asarray(scorer.score(np.stack([_data(r_a), _data(r_b)])), dtype=np.float64)
    return _compare(s[0], s[1])


@dataclass(frozen=True)
class PairVerdict:
    decision: str
    votes_a: int
    votes_b: int
    ties: int


def verdict_from_scores(scores_a, scores_b) -> PairVerdict:
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    diff = scores_b - scores_a
    votes_a = int(np.sum(diff > TIE_TOLERANCE))
    votes_b = int(np.sum(diff < -TIE_TOLERANCE))
    ties = len(diff) - votes_a - votes_b
    if votes_a > votes_b:
        decision = A_LESS
    elif votes_b > votes_a:
        decision = B_LESS
    else:
        decision = TIE
    return PairVerdict(decision, votes_a, votes_b, ties)


def order_image_pair(scorer, rois_a, rois_b) -> PairVerdict:
    """Majority vote over index-registered ROIs of two images."""
    rois_a, rois_b = list(rois_a), list(rois_b)
    if len(rois_a) != len(rois_b):
        raise LengthMismatch(f"{len(rois_a)} ROIs for A but {len(rois_b)} for B")
    if not rois_a:
        raise EmptyRois("no ROIs to compare")
    n = len(rois_a)
    batch = np.stack([_data(r) for r in rois_a] + [_data(r) for r in rois_b])
    s = scorer.score(batch)
    return verdict_from_scores(s[:n], s[n:])


@dataclass
class ScoreMatrix:
    """Scores of I registered patches (rows) across J images (columns)."""

    scores: np.ndarray
    patch_rects: list = field(default_factory=list)
    image_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        i, j = self.scores.shape
        if i < 1 or j < 2:
            raise DegenerateMatrix(f"need >= 1 patch and >= 2 images, got {i}x{j}")
        if not self.image_ids:
            self.image_ids = [str(k) for k in range(j)]


def rank_image_set(scores) -> tuple[np.ndarray, np.ndarray]:
    """Rank images by the median of their per-patch ranks.

    Returns ``(image_ranks, per_patch_ranks)``; the per-image medians are
    re-ranked so the output is a proper rank vector over 1..J.
    """
    if not isinstance(scores, ScoreMatrix):
        scores = ScoreMatrix(scores)
    m = scores.scores
    per_patch = np.vstack([average_ranks(row) for row in m])
    if np.all(m.max(axis=1) == m.min(axis=1)):
        raise DegenerateMatrix("every patch scores all images equally")
    medians = np.median(per_patch, axis=0)
    return average_ranks(medians), per_patch


def patch_correlations(predicted, expected) -> tuple[list[float], int]:
    """Spearman rho of each predicted rank row against the expected ranks."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    expected = np.asarray(expected, dtype=np.float64)
    if predicted.shape[1] != expected.size:
        raise LengthMismatch("predicted rows and expected ranks differ in length")
    rhos, skipped = [], 0
    for row in predicted:
        try:
            rhos.append(spearman(row, expected))
        except DegenerateInput:
            if np.ptp(expected) == 0:
                raise
            skipped += 1
    return rhos, skipped


def set_rank_accuracy(predicted, expected) -> float:
    """Median over patches of the Spearman rho against ``expected``."""
    rhos, _ = patch_correlations(predicted, expected)
    if not rhos:
        raise DegenerateInput("every patch ranking has zero variance")
    return float(np.median(rhos))


def tp_rate(scorer, labeled_pairs) -> float:
    """Percentage of pairs whose less distorted patch scores strictly lower."""
    pairs = list(labeled_pairs)
    if not pairs:
        raise EmptyInput("no labelled pairs")
    n = len(pairs)
    batch = np.stack([_data(p.patch_a) for p in pairs] + [_data(p.patch_b) for p in pairs])
    s = np.asarray(scorer.score(batch), dtype=np.float64)
    return 100.0 * float(np.mean(s[n:] - s[:n] > TIE_TOLERANCE))


def pair_outcome_rates(scores_a, scores_b) -> tuple[float, float, float]:
    """(TP, tie, false) percentages for pairs whose first element is less distorted."""
    diff = np.asarray(scores_b, dtype=np.float64) - np.asarray(scores_a, dtype=np.float64)
    n = len(diff)
    if n == 0:
        raise EmptyInput("no pairs")
    tp = int(np.sum(diff > TIE_TOLERANCE))
    false = int(np.sum(diff < -TIE_TOLERANCE))
    ties = n - tp - false
    return 100.0 * tp / n, 100.0 * ties / n, 100.0 * false / n


# -- ROI selection across a set ---------------------------------------------


def set_rois(images, max_rois: int):
    """ROIs from summed error maps of each image against the elementwise median."""
    images = [as_image(im) for im in images]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DimensionMismatch(f"images differ in size: {sorted(shapes)}")
    median = np.median(np.stack(images), axis=0)
    total = sum(error_map(im, median) for im in images)
    return select_rois(total, max_rois)


def score_matrix(scorer, images, rects, image_ids=None) -> ScoreMatrix:
    j = len(images)
    batch = np.stack([crop(im, r) for r in rects for im in images])
    s = np.asarray(scorer.score(batch), dtype=np.float64).reshape(len(rects), j)
    return ScoreMatrix(s, list(rects), list(image_ids or []))


# -- Monte-Carlo harnesses --------------------------------------------------


@dataclass
class MonteCarloResult:
    """Summary value (TP% or median rho) plus per-trial records."""

    value: float
    trials: list[dict]
    skipped: int


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), trial]))


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return int(rng)


def _check_set(image_set, need: int, crop_size: int):
    items = [(as_image(im), float(level)) for im, level in image_set]
    levels = {lv for _, lv in items}
    if len(items) < 2 or len(levels) < need:
        raise InsufficientImages(f"need >= {need} images with distinct levels, got {len(levels)}")
    if len({im.shape for im, _ in items}) != 1:
        raise DimensionMismatch("images in a set must be registered (same size)")
    for im, _ in items:
        if im.shape[0] < crop_size or im.shape[1] < crop_size:
            raise InsufficientImages(f"image {im.shape[1]}x{im.shape[0]} smaller than crop {crop_size}")
    if crop_size < PATCH_SIZE:
        raise ValueError("crop must hold at least one 32x32 ROI")
    return items


def _random_crop(rng, shape, size):
    h, w = shape[:2]
    return (int(rng.integers(0, w - size + 1)), int(rng.integers(0, h - size + 1)), size, size)


def _pick_distinct(rng, items, k):
    by_level: dict[float, list[int]] = {}
    for idx, (_, lv) in enumerate(items):
        by_level.setdefault(lv, []).append(idx)
    levels = sorted(by_level)
    chosen = sorted(rng.choice(len(levels), size=k, replace=False))
    picks = []
    for li in chosen:
        group = by_level[levels[li]]
        picks.append(group[int(rng.integers(len(group)))])
    return picks  # ascending level order


def monte_carlo_pairs(image_set, scorer, n_trials: int, crop_size: int = 150, rng=0,
                      max_rois: int = 8) -> MonteCarloResult:
    """Pairwise TP% over random shared crops of image pairs with distinct levels."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    items = _check_set(image_set, 2, crop_size)
    seed = _seed_of(rng)
    trials, skipped, correct = [], 0, 0
    for t in range(n_trials):
        r = _trial_rng(seed, t)
        ia, ib = _pick_distinct(r, items, 2)
        (img_a, lv_a), (img_b, lv_b) = items[ia], items[ib]
        rects = None
        for _ in range(MAX_CROP_ATTEMPTS):
            c = _random_crop(r, img_a.shape, crop_size)
            ca, cb = crop(img_a, c), crop(img_b, c)
            try:
                rects = select_rois(error_map(ca, cb), max_rois)
                break
            except NoQualifyingRoi:
                continue
        if rects is None:
            skipped += 1
            continue
        s = scorer.score(np.stack([crop(ca, q) for q in rects] + [crop(cb, q) for q in rects]))
        verdict = verdict_from_scores(s[: len(rects)], s[len(rects):])
        ok = verdict.decision == A_LESS
        correct += ok
        trials.append({"trial": t, "type": "pair", "decision": verdict.decision,
                       "correct": int(ok), "level_a": lv_a, "level_b": lv_b,
                       "n_rois": len(rects), "crop": c})
    if not trials:
        raise NoQualifyingRoi("every trial failed to find a qualifying ROI")
    return MonteCarloResult(100.0 * correct / len(trials), trials, skipped)


def set_trial(scorer, images, levels, crop_rect, max_rois):
    """One set-ranking trial; returns (rho, n_rois) or raises NoQualifyingRoi."""
    crops = [crop(im, crop_rect) for im in images]
    rects = set_rois(crops, max_rois)
    sm = score_matrix(scorer, crops, rects)
    expected = average_ranks(levels)
    try:
        _, per_patch = rank_image_set(sm)
        rho = set_rank_accuracy(per_patch, expected)
    except (DegenerateMatrix, DegenerateInput):
        rho = 0.0
    return rho, len(rects)


def monte_carlo_sets(image_set, scorer, n_trials: int, set_size: int = 4, crop_size: int = 150,
                     rng=0, max_rois: int = 8) -> MonteCarloResult:
    """Median Spearman rho of set rankings over random shared crops."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if set_size < 2:
        raise ValueError("set_size must be >= 2")
    items = _check_set(image_set, set_size, crop_size)
    seed = _seed_of(rng)
    trials, skipped = [], 0
    for t in range(n_trials):
        r = _trial_rng(seed, t)
        picks = _pick_distinct(r, items, set_size)
        images = [items[k][0] for k in picks]
        levels = [items[k][1] for k in picks]
        result = None
        for _ in range(MAX_CROP_ATTEMPTS):
            c = _random_crop(r, images[0].shape, crop_size)
            try:
                result = set_trial(scorer, images, levels, c, max_rois)
                break
            except NoQualifyingRoi:
                continue
        if result is None:
            skipped += 1
            continue
        rho, n_rois = result
        trials.append({"trial": t, "type": "set", "rho": rho, "n_rois": n_rois,
                       "levels": levels, "crop": c})
    if not trials:
        raise NoQualifyingRoi("every trial failed to find a qualifying ROI")
    return MonteCarloResult(float(np.median([tr["rho"] for tr in trials])), trials, skipped)
