import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cldtrack.adapter import (AdapterState, condition_tokens, init_adapter, plain_adapter, project_normalize,
                              score_descriptions, select_description)
from cldtrack.bag import Dictionary, match_dictionary
from cldtrack.embedding import cosine_sim, l2_normalize
from cldtrack.errors import DegenerateInputError, DimensionMismatchError

from conftest import unit_rows


def test_no_context_returns_normalized_entry(rng):
    d = rng.normal(size=6)
    out = condition_tokens(rng.normal(size=6), plain_adapter(6), d)
    assert np.allclose(out, l2_normalize(d), atol=1e-15)


def test_zero_meta_net_ignores_image(rng):
    st_ = init_adapter(6, 3, seed=1)
    st_ = AdapterState(st_.context, np.zeros((6, 6)), np.zeros(6), st_.proj, st_.tau_temp)
    d = rng.normal(size=6)
    assert np.array_equal(condition_tokens(rng.normal(size=6), st_, d), condition_tokens(rng.normal(size=6), st_, d))


def test_conditioning_depends_on_image(rng):
    st_ = init_adapter(8, 4, seed=2, scale=0.5)
    d = rng.normal(size=8)
    a = condition_tokens(rng.normal(size=8), st_, d)
    b = condition_tokens(rng.normal(size=8), st_, d)
    assert cosine_sim(a, b) < 1 - 1e-9


def test_scores_match_recomputation(rng):
    st_ = init_adapter(8, 3, seed=5, scale=0.3, tau_temp=0.2)
    bag = rng.normal(size=(8, 8))
    f = rng.normal(size=8)
    m = st_.meta_w @ f + st_.meta_b
    logits = []
    for d in bag:
        u = (sum(v + m for v in st_.context) + d) / 4
        u = u / math.sqrt(sum(x * x for x in u))
        logits.append(sum(a * b for a, b in zip(u, f)) / math.sqrt(sum(x * x for x in f)) / st_.tau_temp)
    top = max(logits)
    e = [math.exp(v - top) for v in logits]
    expect = np.array([x / math.fsum(e) for x in e])
    got = score_descriptions(f, bag, st_)
    assert np.max(np.abs(got - expect)) < 1e-12 and abs(got.sum() - 1) < 1e-12


def test_score_special_cases(rng):
    st_ = init_adapter(5, 2, seed=0)
    assert score_descriptions(rng.normal(size=5), rng.normal(size=(1, 5)), st_).tolist() == [1.0]
    same = np.tile(rng.normal(size=5), (4, 1))
    assert np.allclose(score_descriptions(rng.normal(size=5), same, st_), 0.25, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        score_descriptions(np.ones(5), np.zeros((0, 5)), st_)
    with pytest.raises(DimensionMismatchError):
        score_descriptions(np.ones(4), np.ones((2, 5)), st_)


def test_plain_adapter_reduces_to_dictionary_matching(rng):
    for _ in range(100):
        k = int(rng.integers(1, 20))
        bag = rng.normal(size=(k, 8))
        f = rng.normal(size=8)
        assert select_description(f, bag, plain_adapter(8)).index == match_dictionary(f, Dictionary(
            [str(i) for i in range(k)], bag, "class"))[0]


def test_dominant_entry_and_ties():
    eye = np.eye(6)
    bag = np.stack([eye[1], eye[2], eye[0], eye[3]])
    assert select_description(eye[0], bag, plain_adapter(6)).index == 2
    tied = np.stack([eye[1], eye[2], eye[0] + eye[1], eye[3], eye[4], eye[0] + eye[1]])
    assert select_description(eye[0], tied, plain_adapter(6)).index == 2


def test_projection_cases(rng):
    st_ = plain_adapter(7)
    assert np.allclose(project_normalize(np.zeros(7), st_), 1 / 7, atol=1e-15)
    peaked = project_normalize(100 * np.eye(7)[3], st_)
    assert peaked[3] > 1 - 1e-12
    st_ = init_adapter(7, 2, seed=4, scale=0.4)
    raw = rng.normal(size=7)
    z = st_.proj @ raw
    expect = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    assert np.max(np.abs(project_normalize(raw, st_) - expect)) < 1e-12
    sel = select_description(rng.normal(size=7), rng.normal(size=(3, 7)), st_)
    assert abs(sel.projected.sum() - 1) < 1e-6


def test_state_validation():
    with pytest.raises(ValueError):
        AdapterState(np.zeros((1, 3)), np.zeros((3, 3)), np.zeros(3), np.eye(3), tau_temp=0.0)
    with pytest.raises(DimensionMismatchError):
        AdapterState(np.zeros((1, 4)), np.zeros((3, 3)), np.zeros(3), np.eye(3))
    with pytest.raises(DegenerateInputError):
        AdapterState(np.zeros((1, 3)), np.full((3, 3), np.inf), np.zeros(3), np.eye(3))
    st_ = init_adapter(4, 2, seed=9)
    back = AdapterState.from_dict(st_.to_dict())
    assert all(np.array_equal(getattr(st_, n), getattr(back, n)) for n in ("context", "meta_w", "meta_b", "proj"))


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_selection_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    st_ = init_adapter(6, 2, seed=seed, scale=0.3)
    bag, f = rng.normal(size=(6, 6)), rng.normal(size=6)
    st0 = AdapterState(st_.context, np.zeros((6, 6)), st_.meta_b, st_.proj, st_.tau_temp)
    # the meta-net sees the raw feature, so only its zero-map form is scale free
    assert select_description(c * f, bag, st0).index == select_description(f, bag, st0).index


@given(st.integers(0, 10_000))
def test_scores_are_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    st_ = init_adapter(6, 3, seed=seed, scale=0.3)
    bag, f = unit_rows(rng, 7, 6), rng.normal(size=6)
    perm = rng.permutation(7)
    p, pp = score_descriptions(f, bag, st_), score_descriptions(f, bag[perm], st_)
    assert np.allclose(pp, p[perm], atol=1e-15)
    i, j = select_description(f, bag, st_).index, select_description(f, bag[perm], st_).index
    assert np.array_equal(bag[i], bag[perm][j])


@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
def test_projection_is_a_distribution(raw):
    out = project_normalize(np.array(raw), init_adapter(4, 1, seed=0))
    assert np.all(out >= 0) and abs(out.sum() - 1) < 1e-6
