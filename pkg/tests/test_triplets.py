import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sidescore.triplets import (Augment, MinedTriplets, Triplet, mine_by_class, mine_by_quantile,
                                mine_self_supervised, quantile_bins)


def assert_class_valid(trips, classes):
    classes = np.asarray(classes)
    for a, p, n in trips:
        assert 0 <= min(a, p, n) and max(a, p, n) < len(classes)
        assert a != p
        assert classes[a] == classes[p]
        assert classes[a] != classes[n]


class TestByClass:
    def test_small_batch(self):
        trips = mine_by_class([0, 0, 1, 1], 4, seed=0)
        assert len(trips) == 4
        assert_class_valid(trips, [0, 0, 1, 1])
        assert len(set(trips)) == 4

    def test_single_class_errors(self):
        with pytest.raises(ValueError):
            mine_by_class([2, 2, 2], 3)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            mine_by_class([0, 1], 0)

    def test_deterministic(self, rng):
        classes = rng.integers(0, 4, 64)
        assert mine_by_class(classes, 64, seed=9) == mine_by_class(classes, 64, seed=9)
        assert mine_by_class(classes, 64, seed=9) != mine_by_class(classes, 64, seed=10)

    def test_singleton_class_never_anchors(self):
        classes = [0, 0, 0, 1]
        trips = mine_by_class(classes, 100)
        assert all(t.anchor != 3 and t.positive != 3 for t in trips)
        assert {t.negative for t in trips} == {3}

    def test_shortfall_reported_not_padded(self, caplog):
        # pool = sum over rows of (n_c - 1)(N - n_c) = 4 * 1 * 2 = 8
        with caplog.at_level(logging.WARNING, logger="sidescore.triplets"):
            trips = mine_by_class([0, 0, 1, 1], 10)
        assert len(trips) == 8 and trips.requested == 10 and trips.shortfall == 2
        assert "only 8 eligible" in caplog.text

    def test_all_singletons_gives_empty(self):
        trips = mine_by_class([0, 1, 2], 5)
        assert trips == [] and trips.shortfall == 5

    def test_large_batch_rejection_path(self, rng):
        classes = rng.integers(0, 10, 512)
        trips = mine_by_class(classes, 512, seed=1)
        assert len(trips) == 512 and len(set(trips)) == 512
        assert_class_valid(trips, classes)

    def test_uniform_over_pool(self):
        classes = np.array([0, 0, 0, 1, 1])
        pool = {Triplet(a, p, n) for a, p, n in itertools.permutations(range(5), 3)
                if classes[a] == classes[p] and classes[a] != classes[n]}
        counts = dict.fromkeys(pool, 0)
        n_draws = 4000
        for s in range(n_draws):
            (t,) = mine_by_class(classes, 1, seed=s)
            counts[t] += 1
        expected = n_draws / len(pool)
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        assert len(pool) == 18
        assert chi2 < stats.chi2.ppf(0.999, len(pool) - 1)

    def test_as_arrays(self):
        a, p, n = MinedTriplets([Triplet(0, 1, 2), Triplet(3, 4, 5)], 2).as_arrays()
        assert a.tolist() == [0, 3] and p.tolist() == [1, 4] and n.tolist() == [2, 5]
        assert all(x.size == 0 for x in MinedTriplets([], 1).as_arrays())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.integers(1, 80), st.integers(0, 10**6))
def test_by_class_always_valid(classes, n, seed):
    if len(set(classes)) < 2:
        with pytest.raises(ValueError):
            mine_by_class(classes, n, seed)
        return
    trips = mine_by_class(classes, n, seed)
    assert_class_valid(trips, classes)
    assert len(set(trips)) == len(trips) <= n


class TestQuantile:
    def test_four_points_two_bins(self):
        # brute force: lower median of [1,2,3,4] is 2, values <= 2 go to bin 0
        assert quantile_bins([1, 2, 3, 4], 2).tolist() == [0, 0, 1, 1]
        trips = mine_by_quantile([1, 2, 3, 4], 2, 4, seed=0)
        assert_class_valid(trips, [0, 0, 1, 1])

    def test_unsorted_input(self):
        assert quantile_bins([4, 1, 3, 2], 2).tolist() == [1, 0, 1, 0]

    def test_edge_ties_go_low(self):
        bins = quantile_bins([1, 2, 2, 2, 3, 4], 2)
        assert bins.tolist() == [0, 0, 0, 0, 1, 1]

    def test_monotone_invariance(self, rng):
        v = rng.normal(size=200)
        base = quantile_bins(v, 4)
        for f in (np.exp, lambda x: 3 * x + 7, lambda x: x ** 3, np.arctan):
            assert np.array_equal(quantile_bins(f(v), 4), base)

    def test_equal_count_bins(self, rng):
        counts = np.bincount(quantile_bins(rng.normal(size=400), 4))
        assert counts.tolist() == [100, 100, 100, 100]

    def test_errors(self):
        with pytest.raises(ValueError):
            quantile_bins([5, 5, 5], 2)
        with pytest.raises(ValueError):
            quantile_bins([1, 2, 3], 4)
        with pytest.raises(ValueError):
            quantile_bins([1, 2, np.nan], 2)
        with pytest.raises(ValueError):
            quantile_bins([1, 2, 3], 1)

    def test_singleton_bins_skip_as_anchor(self):
        # one point per bin: no anchor has a positive, so nothing is mined
        trips = mine_by_quantile([1.0, 2.0, 3.0, 4.0], 4, 5)
        assert trips == [] and trips.shortfall == 5


class TestSelfSupervised:
    def test_zero_strength(self, rng):
        batch = rng.normal(size=(10, 5))
        mined = mine_self_supervised(batch, Augment("jitter", 0.0), seed=3)
        for i, t in enumerate(mined.triplets):
            assert t.positive == 10 + i
            assert np.array_equal(mined.views[i], batch[t.anchor])

    def test_negative_differs(self, rng):
        batch = rng.normal(size=(3, 2))
        for s in range(50):
            mined = mine_self_supervised(batch, n_triplets=20, seed=s)
            assert all(t.negative != t.anchor and t.negative < 3 for t in mined.triplets)

    def test_deterministic(self, rng):
        batch = rng.normal(size=(8, 4))
        a = mine_self_supervised(batch, seed=1)
        b = mine_self_supervised(batch, seed=1)
        assert a.triplets == b.triplets and np.array_equal(a.views, b.views)

    def test_jitter_scale(self, rng):
        batch = rng.normal(size=(4000, 3)) * np.array([1.0, 10.0, 100.0])
        mined = mine_self_supervised(batch, Augment("jitter", 0.1), seed=2)
        a = np.array([t.anchor for t in mined.triplets])
        resid = mined.views - batch[a]
        np.testing.assert_allclose(resid.std(0), 0.1 * batch.std(0), rtol=0.05)

    def test_shift_images(self, rng):
        img = np.zeros((2, 784))
        img[:, 14 * 28 + 14] = 1.0
        mined = mine_self_supervised(img, Augment("shift", 2), n_triplets=10, seed=0)
        for v in mined.views:
            y, x = divmod(int(np.argmax(v)), 28)
            assert v.sum() == 1.0 and abs(y - 14) <= 2 and abs(x - 14) <= 2

    def test_errors(self):
        with pytest.raises(ValueError):
            mine_self_supervised(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            Augment("rotate")
        with pytest.raises(ValueError):
            Augment("jitter", -1)
