import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cldtrack.embedding import argmax, cosine_sim, cosine_sims, l2_normalize, softmax
from cldtrack.errors import DegenerateInputError, DimensionMismatchError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


def test_l2_normalize_examples():
    assert np.allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=0, rtol=1e-15)
    assert np.array_equal(l2_normalize([1, 0, 0]), [1.0, 0.0, 0.0])
    v = np.random.default_rng(0).normal(size=512)
    out = l2_normalize(v)
    assert abs(math.sqrt(math.fsum(x * x for x in out)) - 1.0) < 1e-6
    assert cosine_sim(out, v) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(DegenerateInputError):
        l2_normalize(np.zeros(4))


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    a, b = np.array([1.0, 2.0, -0.5]), np.array([0.2, 0.1, 4.0])
    assert cosine_sim(2 * a, 3 * b) == pytest.approx(cosine_sim(a, b), abs=1e-12)


def test_cosine_errors():
    with pytest.raises(DimensionMismatchError):
        cosine_sim([1, 0], [1, 0, 0])
    with pytest.raises(DegenerateInputError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(DegenerateInputError):
        cosine_sims([1, 0], [[1, 0], [0, 0]])


def test_softmax_examples():
    assert np.allclose(softmax([2.5, 2.5, 2.5]), [1 / 3] * 3, atol=1e-15)
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-12


def test_softmax_matches_extended_precision_oracle():
    from decimal import Decimal, getcontext
    getcontext().prec = 50
    s = np.random.default_rng(7).normal(scale=3.0, size=10)
    ex = [Decimal(float(x)).exp() for x in s]
    total = sum(ex)
    oracle = np.array([float(e / total) for e in ex])
    assert np.max(np.abs(softmax(s) - oracle)) < 1e-12


def test_softmax_rejects_bad_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], t)


def test_argmax_examples_and_scan_oracle():
    assert argmax([0.1, 0.9, 0.3]) == 1
    assert argmax([0.5, 0.5]) == 0
    with pytest.raises(DegenerateInputError):
        argmax([])
    rng = np.random.default_rng(3)
    for _ in range(1000):
        v = rng.integers(0, 5, size=rng.integers(1, 20)).astype(float)
        best = 0
        for i in range(len(v)):
            if v[i] > v[best]:
                best = i
        assert argmax(v) == best


@given(vectors, st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_cosine_scale_invariant_and_bounded(v, s1, s2):
    if not np.any(v):
        return
    w = v[::-1].copy() + 0.5
    if not np.any(w):
        return
    c = cosine_sim(v, w)
    assert -1.0 <= c <= 1.0
    assert cosine_sim(s1 * v, s2 * w) == pytest.approx(c, abs=1e-9)
    assert cosine_sim(w, v) == pytest.approx(c, abs=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 10), st.just(4)), elements=finite),
       arrays(np.float64, 4, elements=finite), st.floats(0.001, 1000.0))
def test_argmax_over_cosines_scale_invariant(rows, q, scale):
    if not np.any(q) or np.any(np.linalg.norm(rows, axis=1) == 0):
        return
    assert argmax(cosine_sims(q, rows)) == argmax(cosine_sims(scale * q, rows))


@given(arrays(np.float64, st.integers(1, 10), elements=finite), st.randoms(use_true_random=False))
def test_softmax_sums_to_one_and_permutation_equivariant(s, r):
    p = softmax(s)
    assert abs(p.sum() - 1.0) < 1e-6 and np.all(p >= 0)
    perm = list(range(len(s)))
    r.shuffle(perm)
    assert np.array_equal(softmax(s[perm]), p[perm])


def test_softmax_temperature_limits():
    s = np.array([0.3, 1.7, -0.4, 1.1])
    assert np.max(np.abs(softmax(s, 1e3) - 0.25)) < 1e-2
    hot = softmax(s, 1e-3)
    assert abs(hot[1] - 1.0) < 1e-2


def test_exact_fraction_norm():
    # 3-4-5 again, with exact rational arithmetic on the squared output
    out = l2_normalize([3, 4])
    assert Fraction(out[0]) ** 2 + Fraction(out[1]) ** 2 == pytest.approx(1, abs=1e-15)
