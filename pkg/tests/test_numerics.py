import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silif.errors import NumericError, ParameterRangeError, SingularTransitionError
from silif.numerics import Rng, eig_2x2, log_uniform_sample, stream_id_for, zoh_discretize_diag

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix_int(z):
    z &= MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK
    z ^= z >> 31
    return z


def _reference_stream(seed, sid, n):
    """Pure-integer SplitMix64 in counter mode, written from the documented constants."""
    key = _mix_int((seed * GOLDEN + _mix_int(sid + GOLDEN)) & MASK)
    return [_mix_int((key + (i + 1) * GOLDEN) & MASK) for i in range(n)]


class TestRng:
    def test_frozen_outputs(self):
        assert [int(x) for x in Rng(0).random_raw(3)] == [0x568A9B0B1A2C05EC, 0x44E5B8B147EF718B, 0x458563AB55521133]
        assert [int(x) for x in Rng(42, 7).random_raw(3)] == [0xBE0D68377E05D098, 0x7F690C71C3F9A143, 0x97C7B595E1903076]

    @given(st.integers(0, MASK), st.integers(0, MASK))
    @settings(max_examples=50, deadline=None)
    def test_matches_integer_reference(self, seed, sid):
        assert [int(x) for x in Rng(seed, sid).random_raw(5)] == _reference_stream(seed, sid, 5)

    def test_counter_resumes_stream(self):
        full = Rng(5, 3).random_raw(10)
        r = Rng(5, 3)
        r.random_raw(4)
        resumed = Rng(*r.state()).random_raw(6)
        assert np.array_equal(full[4:], resumed)

    def test_same_stream_identical_distinct_streams_uncorrelated(self):
        a = Rng(1, 10).random(20000)
        assert np.array_equal(a, Rng(1, 10).random(20000))
        b = Rng(1, 11).random(20000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.03
        assert abs(a.mean() - 0.5) < 0.01

    def test_spawn_is_deterministic_and_named(self):
        root = Rng(9)
        assert np.array_equal(root.spawn("layer0").random(5), Rng(9).spawn("layer0").random(5))
        assert root.spawn("layer0").stream_id == stream_id_for("layer0")
        assert not np.array_equal(root.spawn("layer0").random(5), root.spawn("layer1").random(5))

    def test_random_range_and_integers(self):
        r = Rng(2)
        u = r.random(10000)
        assert u.min() >= 0 and u.max() < 1
        k = r.integers(-2, 3, 10000)
        assert set(np.unique(k)) == {-2, -1, 0, 1, 2}

    def test_permutation(self):
        p = Rng(3).permutation(100)
        assert sorted(p) == list(range(100))
        assert not np.array_equal(p, np.arange(100))


class TestLogUniform:
    def test_degenerate_interval_exact(self):
        assert log_uniform_sample(Rng(0), 5, 5) == 5

    def test_containment_and_median(self):
        x = log_uniform_sample(Rng(0), 0.01, 5, size=100_000)
        assert x.min() >= 0.01 and x.max() <= 5
        # median of exp(U(log lo, log hi)) is sqrt(lo*hi) = 0.22360679774997897
        assert abs(np.median(x) - 0.22360679774997897) / 0.22360679774997897 < 0.05

    @pytest.mark.parametrize("lo,hi", [(0, 1), (-1, 1), (2, 1)])
    def test_bad_range(self, lo, hi):
        with pytest.raises(ParameterRangeError):
            log_uniform_sample(Rng(0), lo, hi)


class TestEig2x2:
    def test_triangular(self):
        assert eig_2x2([[0.9, -0.1], [0, 0.8]]) == (0.9, 0.8)

    def test_complex_pair(self):
        l1, l2 = eig_2x2([[0.9, -0.1], [1, 0.9]])
        # 0.9 +- i sqrt(0.1), sqrt(0.1) = 0.31622776601683794
        assert abs(l1 - complex(0.9, 0.31622776601683794)) < 1e-15
        assert abs(l2 - complex(0.9, -0.31622776601683794)) < 1e-15

    def test_identity_duplicates(self):
        assert eig_2x2(np.eye(2)) == (1, 1)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            eig_2x2([[np.nan, 0], [0, 1]])

    def test_shape(self):
        with pytest.raises(ValueError):
            eig_2x2(np.eye(3))

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_rotation_form_exact(self, re, im):
        l1, l2 = eig_2x2([[re, -im], [im, re]])
        assert {l1, l2} == {complex(re, im), complex(re, -im)}

    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
    def test_roots_satisfy_characteristic_polynomial(self, v):
        m = np.array(v).reshape(2, 2)
        tr, det = np.trace(m), np.linalg.det(m)
        for lam in eig_2x2(m):
            assert abs(lam * lam - tr * lam + det) < 1e-9 * (1 + abs(lam) ** 2 + abs(tr) + abs(det))
        l1, l2 = eig_2x2(m)
        assert (l1.real, l1.imag) >= (l2.real, l2.imag)


class TestZoh:
    def test_closed_form(self):
        a_bar, b_bar = zoh_discretize_diag(-1, 1, math.log(2))
        assert abs(a_bar - 0.5) <= 1e-15 and abs(b_bar - 0.5) <= 1e-15

    def test_zero_input(self):
        assert zoh_discretize_diag(-1, 0, 1)[1] == 0

    def test_complex_pole(self):
        a_bar, _ = zoh_discretize_diag(complex(-0.5, math.pi), 1, 1)
        # exp(-0.5 + i pi) = -exp(-0.5) = -0.6065306597126334
        assert abs(a_bar - (-0.6065306597126334)) < 1e-15

    def test_singular(self):
        with pytest.raises(SingularTransitionError):
            zoh_discretize_diag(0, 1, 1)

    def test_bad_dt(self):
        with pytest.raises(ParameterRangeError):
            zoh_discretize_diag(-1, 1, 0)

    @given(st.floats(-50, -1e-6), st.floats(-50, 50), st.floats(1e-6, 10))
    def test_stable_pole_stays_in_disk(self, re, im, dt):
        a_bar, _ = zoh_discretize_diag(complex(re, im), 1, dt)
        assert abs(a_bar) < 1

    @given(st.floats(-5, -0.01), st.floats(-5, 5), st.floats(0.01, 2))
    def test_matches_cmath(self, re, im, dt):
        a = complex(re, im)
        a_bar, b_bar = zoh_discretize_diag(a, 2.0, dt)
        assert abs(a_bar - cmath.exp(a * dt)) < 1e-14
        assert abs(b_bar - (cmath.exp(a * dt) - 1) / a * 2.0) < 1e-12
