import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fes.errors import ConfigError, DataError
from fes.metrics import (
    ThresholdSet,
    context_sensitive_threshold,
    cosine_matrix,
    cosine_sim,
    derive_context_threshold,
    derive_similarity_threshold,
    haversine,
    haversine_matrix,
    ranked_value,
)

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)
point = st.tuples(lat, lon)
taus = st.floats(0.0, 0.999, allow_nan=False)


def _brute_rank(values, tau, descending):
    ordered = sorted(values, reverse=descending)
    rank = min(max(int(math.floor(tau * len(ordered))), 1), len(ordered))
    return ordered[rank - 1]


class TestHaversine:
    def test_identity(self):
        assert haversine((12.5, -40.0), (12.5, -40.0)) == 0.0

    def test_antipodal_on_equator(self):
        assert haversine((0.0, 0.0), (0.0, 180.0)) == pytest.approx(math.pi * 6371.0, abs=1e-6)
        assert haversine((0.0, 0.0), (0.0, 180.0)) == pytest.approx(20015.09, abs=0.01)

    def test_symmetry_random_pairs(self, rng):
        for _ in range(100):
            a = (rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = (rng.uniform(-90, 90), rng.uniform(-180, 180))
            assert haversine(a, b) == haversine(b, a)

    @given(point, point, point)
    def test_triangle_inequality(self, a, b, c):
        assert haversine(a, b) <= haversine(a, c) + haversine(c, b) + 1e-9

    def test_matrix_matches_scalar(self, rng):
        pts = np.c_[rng.uniform(-90, 90, 6), rng.uniform(-180, 180, 6)]
        d = haversine_matrix(pts)
        for i in range(6):
            for j in range(6):
                assert d[i, j] == pytest.approx(haversine(pts[i], pts[j]), abs=1e-9)


class TestCosine:
    def test_colinear(self):
        assert cosine_sim([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_known_value(self):
        assert cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-5)
        assert cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.70711, abs=1e-5)

    def test_zero_norm_is_zero(self):
        assert cosine_sim([0.0, 0.0], [1.0, 2.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            cosine_sim([1.0, 2.0], [1.0])

    @given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=3, max_size=3),
           st.lists(st.floats(0, 1e3, allow_nan=False), min_size=3, max_size=3))
    def test_non_negative_inputs_in_unit_interval(self, x, y):
        c = cosine_sim(x, y)
        assert 0.0 <= c <= 1.0

    def test_matrix_matches_pairwise(self, rng):
        v = rng.random((7, 5))
        v[3] = 0.0
        m = cosine_matrix(v)
        for i in range(7):
            for j in range(7):
                assert m[i, j] == pytest.approx(cosine_sim(v[i], v[j]), abs=1e-12)


class TestThresholds:
    def test_identical_contexts_give_zero(self):
        ctx = np.tile([[10.0, 20.0]], (5, 1))
        for tau in (0.0, 0.3, 0.9):
            assert derive_context_threshold(ctx, tau) == 0.0

    def test_rank_oracle_ascending(self):
        assert ranked_value(np.arange(10, 0, -1), 0.5) == 5.0

    def test_tau_zero_clamps_to_smallest(self, rng):
        ctx = np.c_[rng.uniform(-60, 60, 8), rng.uniform(-170, 170, 8)]
        d = haversine_matrix(ctx)[np.triu_indices(8, 1)]
        assert derive_context_threshold(ctx, 0.0) == d.min()

    def test_identical_vectors_give_one(self):
        v = np.tile([1.0, 2.0, 0.5], (4, 1))
        for tau in (0.0, 0.5, 0.99):
            assert derive_similarity_threshold(v, tau) == pytest.approx(1.0)

    def test_rank_oracle_descending(self):
        assert ranked_value([0.6, 0.9, 0.7, 0.8], 0.5, descending=True) == 0.8

    def test_tau_near_one(self, rng):
        # floor(tau * L) never reaches L for tau < 1, so the limit is rank L - 1
        v = rng.random((6, 4))
        s = np.sort(cosine_matrix(v)[np.triu_indices(6, 1)])
        assert derive_similarity_threshold(v, 0.999999) == s[1]
        pair = rng.random((2, 4))
        assert derive_similarity_threshold(pair, 0.999999) == pytest.approx(cosine_sim(pair[0], pair[1]))

    def test_brute_force_oracle(self, rng):
        for _ in range(20):
            ctx = np.c_[rng.uniform(-80, 80, 9), rng.uniform(-170, 170, 9)]
            vec = rng.random((9, 6))
            tau = rng.uniform(0, 0.99)
            d = [haversine(ctx[i], ctx[j]) for i in range(9) for j in range(i + 1, 9)]
            s = [cosine_sim(vec[i], vec[j]) for i in range(9) for j in range(i + 1, 9)]
            assert derive_context_threshold(ctx, tau) == pytest.approx(_brute_rank(d, tau, False), abs=1e-9)
            assert derive_similarity_threshold(vec, tau) == pytest.approx(_brute_rank(s, tau, True), abs=1e-12)

    def test_needs_two(self):
        with pytest.raises(DataError):
            derive_context_threshold(np.array([[0.0, 0.0]]), 0.5)
        with pytest.raises(DataError):
            derive_similarity_threshold(np.array([[1.0, 0.0]]), 0.5)

    def test_tau_range(self):
        with pytest.raises(ConfigError):
            ranked_value([1.0, 2.0], 1.0)

    @given(taus, taus)
    def test_monotone_in_tau(self, t1, t2):
        lo, hi = sorted((t1, t2))
        gen = np.random.default_rng(7)
        ctx = np.c_[gen.uniform(-80, 80, 12), gen.uniform(-170, 170, 12)]
        vec = gen.random((12, 5))
        assert derive_context_threshold(ctx, lo) <= derive_context_threshold(ctx, hi)
        assert derive_similarity_threshold(vec, lo) >= derive_similarity_threshold(vec, hi)


class TestContextSensitive:
    def test_n_min_dominates(self):
        assert context_sensitive_threshold(100, 0.5, 150) == 100

    def test_candidate_dominates(self):
        assert context_sensitive_threshold(65, 0.5, 300) == 150

    def test_empty_candidate(self):
        assert context_sensitive_threshold(7, 0.5, 0) == 7

    def test_ceiling(self):
        assert context_sensitive_threshold(1, 0.5, 7) == 4

    def test_threshold_set_validation(self):
        with pytest.raises(ConfigError):
            ThresholdSet(1.0, 1.5, 1, 0.5)
        with pytest.raises(ConfigError):
            ThresholdSet(-1.0, 0.5, 1, 0.5)
        with pytest.raises(ConfigError):
            ThresholdSet(1.0, 0.5, 0, 0.5)
        assert ThresholdSet(1.0, 0.5, 100, 0.5).acceptance_size(150) == 100


def test_cosine_to_matches_matrix(rng):
    from fes.metrics import cosine_matrix, cosine_to

    v = rng.random((7, 5))
    v[3] = 0.0
    assert np.allclose(cosine_to(v[0], v), cosine_matrix(v)[0], atol=1e-12)
    assert cosine_to(np.zeros(5), v).tolist() == [0.0] * 7
