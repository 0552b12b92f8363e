import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankdist import ranking as R
from rankdist.dataset import OrderedPair
from rankdist.distortion import DistortionSpec, dead_leaves, simulate_lca
from rankdist.errors import (
    DegenerateMatrix,
    DimensionMismatch,
    EmptyInput,
    EmptyRois,
    InsufficientImages,
    LengthMismatch,
)
from rankdist.imaging import Patch, average_ranks

from conftest import ConstantScorer, FringeScorer, TableScorer

WORKED_EXAMPLE = [[1, 2, 3, 4], [4, 8, 9, 12], [2, 3, 5, 4]]


def patch(v=0.0):
    return Patch(np.full((32, 32, 3), float(v)), (0, 0, 32, 32))


def lpair(a, b):
    return OrderedPair(patch(a), patch(b), DistortionSpec("lca", 1.0), DistortionSpec("lca", 2.0))


class MeanScorer:
    def score(self, x):
        return np.asarray(x, dtype=np.float64).mean(axis=(1, 2, 3))


def test_order_patch_pair_examples():
    assert R.order_patch_pair(TableScorer([0.2, 0.9]), patch(), patch()) == R.FIRST_LESS
    assert R.order_patch_pair(TableScorer([0.9, 0.2]), patch(), patch()) == R.SECOND_LESS
    assert R.order_patch_pair(MeanScorer(), patch(0.4), patch(0.4)) == R.TIE


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_antisymmetry(a, b):
    s = MeanScorer()
    ab = R.order_patch_pair(s, patch(a), patch(b))
    ba = R.order_patch_pair(s, patch(b), patch(a))
    assert (ab == R.FIRST_LESS) == (ba == R.SECOND_LESS)
    assert (ab == R.TIE) == (ba == R.TIE)


def test_image_pair_votes():
    rois = [patch()] * 4
    v = R.order_image_pair(TableScorer([1, 1, 1, 5, 2, 2, 2, 0]), rois, rois)
    assert (v.decision, v.votes_a, v.votes_b, v.ties) == (R.A_LESS, 3, 1, 0)
    v = R.order_image_pair(TableScorer([1, 1, 5, 5, 2, 2, 0, 0]), rois, rois)
    assert v.decision == R.TIE and v.votes_a == v.votes_b == 2
    same = [patch(0.1), patch(0.5), patch(0.7)]
    v = R.order_image_pair(MeanScorer(), same, same)
    assert v.decision == R.TIE and v.ties == 3


def test_image_pair_errors():
    with pytest.raises(LengthMismatch):
        R.order_image_pair(MeanScorer(), [patch()], [patch(), patch()])
    with pytest.raises(EmptyRois):
        R.order_image_pair(MeanScorer(), [], [])


def test_worked_example():
    image_ranks, per_patch = R.rank_image_set(WORKED_EXAMPLE)
    assert per_patch.tolist() == [[1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 4, 3]]
    assert image_ranks.tolist() == [1, 2, 3, 4]
    rhos, skipped = R.patch_correlations(per_patch, [1, 2, 3, 4])
    assert skipped == 0
    np.testing.assert_allclose(rhos, [1, 1, 0.8], atol=1e-12)
    assert R.set_rank_accuracy(per_patch, [1, 2, 3, 4]) == pytest.approx(1.0, abs=1e-12)


def test_two_images_single_patch():
    ranks, _ = R.rank_image_set([[5, 3]])
    assert ranks.tolist() == [2, 1]


def test_tied_medians_are_reranked():
    # per-patch ranks [1 2 3; 1 3 2; 3 1 2] -> medians [1, 2, 2]
    scores = [[1, 2, 3], [1, 3, 2], [3, 1, 2]]
    ranks, per_patch = R.rank_image_set(scores)
    assert per_patch.tolist() == [[1, 2, 3], [1, 3, 2], [3, 1, 2]]
    medians = np.median(per_patch, axis=0)
    assert medians.tolist() == [1, 2, 2]
    assert ranks.tolist() == [1, 2.5, 2.5]
    assert ranks.tolist() == average_ranks(medians).tolist()


def test_degenerate_matrix():
    with pytest.raises(DegenerateMatrix):
        R.rank_image_set([[2, 2, 2], [1, 1, 1]])
    with pytest.raises(DegenerateMatrix):
        R.rank_image_set([[1]])
    ranks, _ = R.rank_image_set([[2, 2, 2], [1, 2, 3]])
    assert ranks.tolist() == [1, 2, 3]


def test_set_rank_accuracy_extremes():
    assert R.set_rank_accuracy([[1, 2, 3, 4]] * 3, [1, 2, 3, 4]) == 1.0
    assert R.set_rank_accuracy([[4, 3, 2, 1]] * 3, [1, 2, 3, 4]) == -1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_monotone_transform_and_permutation(i, j, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=(i, j)).astype(float)
    if np.all(scores.max(axis=1) == scores.min(axis=1)):
        scores[0, 0] += 1
    ranks, per_patch = R.rank_image_set(scores)
    ranks_t, per_patch_t = R.rank_image_set(np.exp(scores) * 3 - 7)
    assert np.array_equal(ranks, ranks_t) and np.array_equal(per_patch, per_patch_t)
    perm = rng.permutation(j)
    assert np.array_equal(R.rank_image_set(scores[:, perm])[0], ranks[perm])
    assert sorted(ranks) == sorted(average_ranks(ranks))


def test_sorted_columns_rank_in_order():
    scores = np.cumsum(np.random.default_rng(0).random((5, 6)) + 0.01, axis=1)
    assert R.rank_image_set(scores)[0].tolist() == [1, 2, 3, 4, 5, 6]


def test_tp_rate_examples():
    pairs = [lpair(a, a + 0.1) for a in np.linspace(0, 0.8, 20)]
    assert R.tp_rate(MeanScorer(), pairs) == 100.0
    assert R.tp_rate(ConstantScorer(), pairs) == 0.0
    with pytest.raises(EmptyInput):
        R.tp_rate(MeanScorer(), [])


def test_random_scorer_near_half():
    n = 4000

    class RandomScorer:
        rng = np.random.default_rng(3)

        def score(self, x):
            return self.rng.random(len(x))

    tp = R.tp_rate(RandomScorer(), [lpair(0, 0)] * n)
    assert abs(tp - 50.0) <= 3 * 100 * np.sqrt(0.25 / n)


def test_tp_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    a, b = rng.random(50), rng.random(50)
    base = R.pair_outcome_rates(a, b)
    assert R.pair_outcome_rates(np.log(a + 1), np.log(b + 1)) == base


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=50))
def test_outcome_rates_sum_to_100(pairs):
    a, b = np.array(pairs, dtype=float).T
    tp, tie, false = R.pair_outcome_rates(a, b)
    assert tp + tie + false == pytest.approx(100.0, abs=1e-12)


# -- Monte-Carlo harnesses ----------------------------------------------------


@pytest.fixture(scope="module")
def gray_lca_set():
    base = dead_leaves(180, np.random.default_rng(7))
    base = np.repeat(base.mean(axis=2, keepdims=True), 3, axis=2)
    return [(simulate_lca(base, float(s)), float(s)) for s in (1, 2, 3, 4, 5)]


def test_mc_pairs_perfect_scorer(gray_lca_set):
    res = R.monte_carlo_pairs(gray_lca_set[:2], FringeScorer(), 20, crop_size=150, rng=1)
    assert res.value == 100.0 and len(res.trials) + res.skipped == 20
    res = R.monte_carlo_pairs(gray_lca_set, FringeScorer(), 30, crop_size=150, rng=1)
    assert res.value == 100.0
    assert R.monte_carlo_pairs(gray_lca_set, FringeScorer(-1), 30, rng=1).value == 0.0


def test_mc_sets_perfect_and_reversed(gray_lca_set):
    assert R.monte_carlo_sets(gray_lca_set, FringeScorer(), 20, rng=2).value == 1.0
    assert R.monte_carlo_sets(gray_lca_set, FringeScorer(-1), 20, rng=2).value == -1.0


def test_mc_is_seeded(gray_lca_set):
    a = R.monte_carlo_sets(gray_lca_set, FringeScorer(), 5, rng=9)
    b = R.monte_carlo_sets(gray_lca_set, FringeScorer(), 5, rng=9)
    assert a.trials == b.trials


def test_mc_errors(gray_lca_set):
    with pytest.raises(ValueError):
        R.monte_carlo_pairs(gray_lca_set, FringeScorer(), 0)
    with pytest.raises(InsufficientImages):
        R.monte_carlo_pairs(gray_lca_set[:1], FringeScorer(), 5)
    with pytest.raises(InsufficientImages):
        R.monte_carlo_sets(gray_lca_set[:3], FringeScorer(), 5, set_size=4)
    with pytest.raises(InsufficientImages):
        R.monte_carlo_pairs(gray_lca_set, FringeScorer(), 5, crop_size=200)


def test_set_rois_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        R.set_rois([np.zeros((64, 64, 3)), np.zeros((64, 65, 3))], 4)
