import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uscrl.errors import ConfigError, PreconditionError, SizeError
from uscrl.tuples import (REGIME_ALL, REGIME_IID, REGIME_SUB, Tuple, TupleSet,
                          class_tuple_count, count_all_tuples,
                          disjoint_tuples, draw_ksubsets, draw_ordered_pairs,
                          enumerate_all_tuples, enumerate_class_tuples,
                          greedy_iid_tuples, subsample_tuples, tuple_mass,
                          tuple_set_from_jsonl)

from conftest import make_pool
from naive_ref import naive_enumeration


class TestCounts:
    def test_class_tuple_count(self):
        # ordered pairs times unordered subsets
        assert class_tuple_count(3, 5, 1) == 3 * 2 * 5
        assert class_tuple_count(4, 6, 2) == 4 * 3 * 15
        assert class_tuple_count(1, 9, 1) == 0
        assert class_tuple_count(5, 2, 3) == 0  # not enough negatives

    def test_count_all_tuples_toy(self, toy_pool):
        total, per_class = count_all_tuples(toy_pool, k=1)
        assert per_class == [30, 30, 12]
        assert total == 72

    def test_count_matches_enumeration_length(self):
        ds = make_pool([4, 3, 2], seed=3)
        for k in (1, 2):
            total, _ = count_all_tuples(ds, k)
            assert enumerate_all_tuples(ds, k).m_count == total

    def test_rejects_bad_k(self, toy_pool):
        with pytest.raises(ConfigError):
            count_all_tuples(toy_pool, k=0)


class TestTupleSet:
    def test_round_trip_jsonl(self, toy_pool):
        ts = enumerate_all_tuples(toy_pool, k=1)
        back = tuple_set_from_jsonl(ts.to_jsonl(), REGIME_ALL)
        assert back.k == 1
        np.testing.assert_array_equal(back.anchors, ts.anchors)
        np.testing.assert_array_equal(back.positives, ts.positives)
        np.testing.assert_array_equal(back.negatives, ts.negatives)
        np.testing.assert_array_equal(back.class_ids, ts.class_ids)

    def test_getitem_and_iter(self, toy_pool):
        ts = greedy_iid_tuples(toy_pool, k=1)
        first = ts[0]
        assert isinstance(first, Tuple)
        assert list(ts)[0] == first
        assert len(ts) == ts.m_count

    def test_select(self, toy_pool):
        ts = enumerate_all_tuples(toy_pool, k=1)
        sub = ts.select([0, 5, 9])
        assert sub.m_count == 3
        assert sub[1] == ts[5]

    def test_shape_validation(self):
        z = np.zeros(2, dtype=np.int64)
        with pytest.raises(ConfigError):
            TupleSet(REGIME_SUB, 1, z, z[:1], np.zeros((2, 1)), z)
        with pytest.raises(ConfigError):
            TupleSet(REGIME_SUB, 2, z, z, np.zeros((2, 1)), z)
        with pytest.raises(ConfigError):
            TupleSet("bogus", 1, z, z, np.zeros((2, 1)), z)

    def test_validate_catches_violations(self, toy_pool):
        mk = lambda a, p, n, c: TupleSet(REGIME_SUB, 1, [a], [p], [[n]], [c])
        mk(0, 1, 3, 0).validate(toy_pool)  # a valid tuple passes
        with pytest.raises(PreconditionError, match="anchor equals positive"):
            mk(0, 0, 3, 0).validate(toy_pool)
        with pytest.raises(PreconditionError, match="label mismatch"):
            mk(0, 3, 6, 0).validate(toy_pool)
        with pytest.raises(PreconditionError, match="shares the tuple class"):
            mk(0, 1, 2, 0).validate(toy_pool)
        with pytest.raises(PreconditionError, match="out of range"):
            mk(0, 1, 99, 0).validate(toy_pool)
        dup = TupleSet(REGIME_SUB, 2, [0], [1], [[3, 3]], [0])
        with pytest.raises(PreconditionError, match="sorted distinct"):
            dup.validate(toy_pool)


class TestGreedy:
    def test_identity_permutation_exact_layout(self):
        # sizes 4, 3, 5: under identity permutations the construction is
        # fully predictable
        ds = make_pool([4, 3, 5], seed=0)
        ts = greedy_iid_tuples(ds, k=2)
        assert ts.regime == REGIME_IID
        expected = [
            # class 0: pos [0,1,2,3], out [4..11], N_c = min(2, 4) = 2
            (0, 1, (4, 5), 0),
            (2, 3, (6, 7), 0),
            # class 1: pos [4,5,6], out [0,1,2,3,7,...], N_c = min(1, 4) = 1
            (4, 5, (0, 1), 1),
            # class 2: pos [7..11], out [0..6], N_c = min(2, 3) = 2
            (7, 8, (0, 1), 2),
            (9, 10, (2, 3), 2),
        ]
        assert [tuple(t) for t in ts] == expected
        ts.validate(ds)

    def test_explicit_perms(self):
        ds = make_pool([4, 3, 5], seed=0)
        perms = {0: ([3, 2, 1, 0], [7, 6, 5, 4, 3, 2, 1, 0])}
        ts = greedy_iid_tuples(ds, k=2, perms=perms)
        # class 0 runs on reversed orders; classes 1, 2 fall back to identity
        assert ts[0] == Tuple(3, 2, (10, 11), 0)
        assert ts[1] == Tuple(1, 0, (8, 9), 0)
        assert ts[2] == Tuple(4, 5, (0, 1), 1)
        ts.validate(ds)

    def test_rejects_non_permutation(self):
        ds = make_pool([4, 4], seed=0)
        with pytest.raises(ConfigError, match="not a permutation"):
            greedy_iid_tuples(ds, k=1, perms={0: ([0, 0, 1, 2], [0, 1, 2, 3])})

    def test_seeded_draw_is_valid_and_disjoint_per_class(self):
        ds = make_pool([9, 7, 6], seed=1)
        ts = greedy_iid_tuples(ds, k=2, seed=42)
        ts.validate(ds)
        for c in range(3):
            rows = np.flatnonzero(ts.class_ids == c)
            used = np.concatenate([ts.anchors[rows], ts.positives[rows],
                                   ts.negatives[rows].ravel()])
            assert len(np.unique(used)) == used.size  # no sample reused

    def test_counts_match_class_stats(self):
        ds = make_pool([9, 7, 6], seed=1)
        for k in (1, 2, 3):
            ts = greedy_iid_tuples(ds, k, seed=3)
            sizes = ds.class_sizes()
            for c in range(3):
                n_pos = int(sizes[c])
                n_neg = ds.n - n_pos
                expect = min(n_pos // 2, n_neg // k)
                assert int((ts.class_ids == c).sum()) == expect

    def test_infeasible_class_skipped(self):
        ds = make_pool([1, 5], seed=0)
        ts = greedy_iid_tuples(ds, k=1)
        assert np.all(ts.class_ids == 1)


class TestGloballyDisjoint:
    def test_no_sample_reused_anywhere(self):
        ds = make_pool([10, 10, 10], dim=4, seed=40)
        ts = disjoint_tuples(ds, 2, 6, seed=41)
        assert ts.regime == REGIME_IID
        assert ts.m_count == 6
        ts.validate(ds)
        used = np.concatenate([ts.anchors, ts.positives,
                               ts.negatives.ravel()])
        # global disjointness: 6 tuples of k+2 = 4 slots, all distinct
        assert np.unique(used).size == 24

    def test_deterministic(self):
        ds = make_pool([8, 8], dim=3, seed=42)
        a = disjoint_tuples(ds, 1, 4, seed=43)
        b = disjoint_tuples(ds, 1, 4, seed=43)
        c = disjoint_tuples(ds, 1, 4, seed=44)
        np.testing.assert_array_equal(a.anchors, b.anchors)
        np.testing.assert_array_equal(a.negatives, b.negatives)
        assert not (np.array_equal(a.anchors, c.anchors)
                    and np.array_equal(a.negatives, c.negatives))

    def test_exhaustion_raises_with_count(self):
        ds = make_pool([1, 6], dim=3, seed=45)
        # class 1 can pair, class 0 only serves one negative; a second
        # tuple has nothing left to negate against
        one = disjoint_tuples(ds, 1, 1, seed=46)
        assert one.m_count == 1
        with pytest.raises(PreconditionError, match="supports only 1"):
            disjoint_tuples(ds, 1, 2, seed=46)

    def test_zero_and_validation(self):
        ds = make_pool([4, 4], dim=3, seed=47)
        assert disjoint_tuples(ds, 2, 0, seed=0).m_count == 0
        with pytest.raises(ConfigError):
            disjoint_tuples(ds, 0, 1, seed=0)
        with pytest.raises(ConfigError):
            disjoint_tuples(ds, 1, -1, seed=0)

    def test_capacity_boundary(self):
        # 12 samples support exactly 3 tuples at k = 2
        ds = make_pool([6, 6], dim=3, seed=48)
        ts = disjoint_tuples(ds, 2, 3, seed=49)
        ts.validate(ds)
        used = np.concatenate([ts.anchors, ts.positives,
                               ts.negatives.ravel()])
        assert np.unique(used).size == 12
        with pytest.raises(PreconditionError):
            disjoint_tuples(ds, 2, 4, seed=49)


class TestDrawHelpers:
    def test_ordered_pairs_never_equal(self):
        rng = np.random.default_rng(0)
        a, b = draw_ordered_pairs(rng, 7, 5000)
        assert np.all(a != b)
        assert a.min() >= 0 and a.max() < 7 and b.min() >= 0 and b.max() < 7

    def test_ordered_pairs_uniform(self):
        rng = np.random.default_rng(1)
        n, m = 5, 40000
        a, b = draw_ordered_pairs(rng, n, m)
        counts = np.bincount(a * n + b, minlength=n * n).reshape(n, n)
        assert np.all(np.diag(counts) == 0)
        p = 1.0 / (n * (n - 1))
        sigma = np.sqrt(m * p * (1 - p))
        off = counts[~np.eye(n, dtype=bool)]
        assert np.all(np.abs(off - m * p) < 5 * sigma)

    def test_ordered_pairs_needs_two(self):
        with pytest.raises(PreconditionError):
            draw_ordered_pairs(np.random.default_rng(0), 1, 3)

    @pytest.mark.parametrize("n,k", [(5, 2), (6, 5), (40, 3), (4, 4)])
    def test_ksubsets_sorted_distinct(self, n, k):
        rng = np.random.default_rng(2)
        rows = draw_ksubsets(rng, n, k, 500)
        assert rows.shape == (500, k)
        if k > 1:
            assert np.all(np.diff(rows, axis=1) > 0)
        assert rows.min() >= 0 and rows.max() < n

    def test_ksubsets_uniform_dense_branch(self):
        # 4k >= n exercises the key-sort branch
        rng = np.random.default_rng(3)
        n, k, m = 5, 2, 40000
        rows = draw_ksubsets(rng, n, k, m)
        keys = rows[:, 0] * n + rows[:, 1]
        counts = np.bincount(keys, minlength=n * n)
        p = 1.0 / 10  # C(5,2) subsets
        sigma = np.sqrt(m * p * (1 - p))
        hit = counts[counts > 0]
        assert hit.size == 10
        assert np.all(np.abs(hit - m * p) < 5 * sigma)

    def test_ksubsets_uniform_sparse_branch(self):
        # 4k < n exercises the rejection branch
        rng = np.random.default_rng(4)
        n, k, m = 12, 2, 60000
        rows = draw_ksubsets(rng, n, k, m)
        keys = rows[:, 0] * n + rows[:, 1]
        counts = np.bincount(keys, minlength=n * n)
        p = 1.0 / 66  # C(12,2)
        sigma = np.sqrt(m * p * (1 - p))
        hit = counts[counts > 0]
        assert hit.size == 66
        assert np.all(np.abs(hit - m * p) < 5 * sigma)

    def test_ksubsets_rejects_k_too_big(self):
        with pytest.raises(PreconditionError):
            draw_ksubsets(np.random.default_rng(0), 3, 4, 1)


class TestSubsample:
    def test_validates_and_is_seeded(self):
        ds = make_pool([6, 5, 4], seed=5)
        a = subsample_tuples(ds, 2, 300, seed=9)
        b = subsample_tuples(ds, 2, 300, seed=9)
        c = subsample_tuples(ds, 2, 300, seed=10)
        a.validate(ds)
        np.testing.assert_array_equal(a.anchors, b.anchors)
        np.testing.assert_array_equal(a.negatives, b.negatives)
        assert not np.array_equal(a.anchors, c.anchors)
        assert a.regime == REGIME_SUB and a.m_count == 300

    def test_class_frequencies_proportional_to_size(self):
        ds = make_pool([12, 6, 6], seed=6)
        m = 30000
        ts = subsample_tuples(ds, 1, m, seed=11)
        counts = np.bincount(ts.class_ids, minlength=3)
        for c, w in enumerate([0.5, 0.25, 0.25]):
            sigma = np.sqrt(m * w * (1 - w))
            assert abs(counts[c] - m * w) < 5 * sigma

    def test_infeasible_class_never_drawn(self):
        ds = make_pool([1, 6, 6], seed=7)
        ts = subsample_tuples(ds, 1, 2000, seed=12)
        assert not np.any(ts.class_ids == 0)
        ts.validate(ds)

    def test_within_class_pairs_uniform(self):
        ds = make_pool([4, 8], seed=8)
        m = 48000
        ts = subsample_tuples(ds, 1, m, seed=13)
        rows = np.flatnonzero(ts.class_ids == 0)
        pairs = ts.anchors[rows] * ds.n + ts.positives[rows]
        counts = np.bincount(pairs, minlength=ds.n * ds.n)
        hit = counts[counts > 0]
        assert hit.size == 12  # 4*3 ordered pairs
        mc = rows.size / 12
        sigma = np.sqrt(rows.size * (1 / 12) * (11 / 12))
        assert np.all(np.abs(hit - mc) < 5 * sigma)

    def test_no_feasible_class_raises(self):
        ds = make_pool([1, 1], seed=0)
        with pytest.raises(PreconditionError):
            subsample_tuples(ds, 1, 5, seed=0)

    def test_zero_draws(self):
        ds = make_pool([3, 3], seed=0)
        ts = subsample_tuples(ds, 1, 0, seed=0)
        assert ts.m_count == 0


class TestEnumeration:
    def test_matches_naive_enumeration(self):
        ds = make_pool([4, 3, 2], seed=9)
        for k in (1, 2):
            for c in range(3):
                pos = ds.class_indices(c).tolist()
                neg = ds.out_indices(c).tolist()
                want = naive_enumeration(pos, neg, k)
                a, p, ng = enumerate_class_tuples(ds, c, k)
                got = [(int(ai), int(pi), tuple(int(x) for x in row))
                       for ai, pi, row in zip(a, p, ng)]
                assert got == want

    def test_all_tuples_class_major_and_valid(self, toy_pool):
        ts = enumerate_all_tuples(toy_pool, k=1)
        assert ts.m_count == 72
        assert np.all(np.diff(ts.class_ids) >= 0)
        ts.validate(toy_pool)

    def test_cap_raises_sizeerror_with_count(self):
        ds = make_pool([6, 6], seed=10)
        total, _ = count_all_tuples(ds, 2)
        with pytest.raises(SizeError) as ei:
            enumerate_all_tuples(ds, 2, cap=total - 1)
        assert str(total) in str(ei.value)
        assert str(total - 1) in str(ei.value)

    def test_infeasible_pool_returns_empty(self):
        ds = make_pool([1, 1], seed=0)
        ts = enumerate_all_tuples(ds, 1)
        assert ts.m_count == 0


class TestTupleMass:
    def test_mass_sums_to_one_when_all_feasible(self, toy_pool):
        ts = enumerate_all_tuples(toy_pool, k=1)
        total = sum(tuple_mass(toy_pool, 1, t) for t in ts)
        assert abs(total - 1.0) < 1e-12

    def test_mass_sums_to_feasible_frequency(self):
        # class 0 has a single sample, so only classes 1 and 2 carry mass
        ds = make_pool([1, 3, 4], seed=11)
        ts = enumerate_all_tuples(ds, k=1)
        total = sum(tuple_mass(ds, 1, t) for t in ts)
        assert abs(total - 7 / 8) < 1e-12

    def test_mass_value(self, toy_pool):
        ts = enumerate_all_tuples(toy_pool, k=1)
        t = ts[0]
        assert t.class_id == 0
        assert tuple_mass(toy_pool, 1, t) == pytest.approx((3 / 8) / 30, abs=0)

    def test_infeasible_class_raises(self):
        ds = make_pool([1, 3], seed=0)
        bad = Tuple(0, 0, (1,), 0)
        with pytest.raises(PreconditionError):
            tuple_mass(ds, 1, bad)


@st.composite
def pool_and_k(draw):
    sizes = draw(st.lists(st.integers(0, 6), min_size=2, max_size=4))
    k = draw(st.integers(1, 3))
    if sum(sizes) == 0:
        sizes[0] = 2
    return sizes, k


class TestProperties:
    @given(pool_and_k())
    @settings(max_examples=40, deadline=None)
    def test_samplers_always_produce_valid_tuples(self, case):
        sizes, k = case
        ds = make_pool(sizes, dim=3, seed=123)
        feasible = any(class_tuple_count(s, ds.n - s, k) > 0 for s in sizes)
        greedy = greedy_iid_tuples(ds, k, seed=1)
        greedy.validate(ds)
        if feasible:
            sub = subsample_tuples(ds, k, 25, seed=2)
            sub.validate(ds)
            assert sub.m_count == 25
        else:
            assert greedy.m_count == 0
            with pytest.raises(PreconditionError):
                subsample_tuples(ds, k, 25, seed=2)

    @given(pool_and_k())
    @settings(max_examples=25, deadline=None)
    def test_enumeration_count_and_validity(self, case):
        sizes, k = case
        ds = make_pool(sizes, dim=3, seed=321)
        total, per_class = count_all_tuples(ds, k)
        ts = enumerate_all_tuples(ds, k, cap=10**6)
        assert ts.m_count == total
        ts.validate(ds)
        for c in range(len(sizes)):
            assert int((ts.class_ids == c).sum()) == per_class[c]
