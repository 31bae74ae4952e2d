import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cldtrack.errors import DegenerateInputError, DimensionMismatchError
from cldtrack.ttfum import (AggregationStrategy, TemporalTextWindow, aggregate, attention_weights, decay_weights,
                            modulate, push, update)

TAGS = ("average", "last", "max", "weighted")


def _prob(rng, q=8):
    x = rng.random(q) + 1e-3
    return x / x.sum()


def test_eviction_and_partial_fill():
    w = TemporalTextWindow(2)
    a, b, c = np.eye(3)
    for v in (a, b, c):
        push(w, v)
    assert np.array_equal(w.contents(), np.stack([b, c])) and w.frame_counter == 3
    w5 = TemporalTextWindow(5)
    for v in (a, b, c):
        w5.push(v)
    assert len(w5) == 3
    with pytest.raises(DimensionMismatchError):
        w5.push(np.ones(4))


def test_buffer_replays_push_log(rng):
    w = TemporalTextWindow(5)
    log = []
    for _ in range(10_000):
        v = rng.random(3)
        log.append(v)
        w.push(v)
        assert np.array_equal(w.contents(), np.stack(log[-5:]))


def test_single_element_collapses_every_strategy(rng):
    v = _prob(rng)
    w = TemporalTextWindow(5).push(v)
    for tag in TAGS:
        assert np.array_equal(aggregate(w, AggregationStrategy(tag)), v)


def test_aggregates_match_brute_force(rng):
    w = TemporalTextWindow(5)
    vs = [_prob(rng) for _ in range(5)]
    for v in vs:
        w.push(v)
    mean = np.array([sum(v[d] for v in vs) / 5 for d in range(8)])
    assert np.max(np.abs(aggregate(w) - mean)) < 1e-12
    assert np.array_equal(aggregate(w, AggregationStrategy("max")), np.array([max(v[d] for v in vs) for d in range(8)]))
    assert np.array_equal(aggregate(w, AggregationStrategy("last")), vs[-1])
    wts = decay_weights(5, 0.5)
    assert np.allclose(wts, np.array([1, 2, 4, 8, 16]) / 31, atol=1e-15)
    expect = sum(c * v for c, v in zip(wts, vs))
    assert np.max(np.abs(aggregate(w, AggregationStrategy("weighted")) - expect)) < 1e-12
    with pytest.raises(DimensionMismatchError):
        aggregate(w, AggregationStrategy("weighted", weights=(0.5, 0.5)))
    a = _prob(rng)
    rep = TemporalTextWindow(3)
    for _ in range(3):
        rep.push(a)
    assert np.allclose(aggregate(rep), a, atol=1e-16)


def test_strategy_validation():
    with pytest.raises(ValueError):
        AggregationStrategy("median")
    with pytest.raises(ValueError):
        AggregationStrategy("weighted", weights=(0.5, 0.6))
    with pytest.raises(DegenerateInputError):
        aggregate(TemporalTextWindow(3))


def test_attention_weights(rng):
    e = _prob(rng)
    assert np.array_equal(attention_weights(e, e), np.full(8, 1 / 8))
    far = e.copy()
    far[2] += 50
    w = attention_weights(e, far)
    assert np.argmin(w) == 2
    a = _prob(rng)
    z = -np.abs(e - a)
    expect = np.exp(z) / np.exp(z).sum()
    assert np.max(np.abs(attention_weights(e, a) - expect)) < 1e-12
    with pytest.raises(DimensionMismatchError):
        attention_weights(e, np.ones(3))


def test_window_of_one_is_last_frame_formula(rng):
    for tag in TAGS:
        w = TemporalTextWindow(1)
        e = _prob(rng)
        for _ in range(4):
            s = _prob(rng)
            w.push(s)
            assert np.array_equal(update(e, w, AggregationStrategy(tag)), attention_weights(e, s) * e)


def test_cold_start_is_uniform(rng):
    e = _prob(rng)
    assert np.array_equal(update(e, TemporalTextWindow(5)), e / 8)
    assert np.array_equal(modulate(np.full(8, 1 / 8), e), e / 8)


def test_interval_caching(rng):
    e = _prob(rng)
    w = TemporalTextWindow(5, update_interval=3)
    w.push(_prob(rng))
    update(e, w)
    first = w.cached_weights.copy()
    w.push(_prob(rng))
    update(e, w)                       # counter 2: not due, reuse
    assert np.array_equal(w.cached_weights, first)
    w.push(_prob(rng))
    update(e, w)                       # counter 3: due
    assert not np.array_equal(w.cached_weights, first)


def test_every_frame_interval_recomputes(rng):
    e = _prob(rng)
    w = TemporalTextWindow(5)
    seen = []
    for _ in range(4):
        w.push(_prob(rng))
        update(e, w)
        seen.append(w.cached_weights.copy())
    assert all(not np.array_equal(a, b) for a, b in zip(seen, seen[1:]))


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_average_is_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    vs = [_prob(rng) for _ in range(n)]
    w1, w2 = TemporalTextWindow(5), TemporalTextWindow(5)
    for v in vs:
        w1.push(v)
    for i in rng.permutation(n):
        w2.push(vs[i])
    assert np.array_equal(aggregate(w1), aggregate(w2))


def test_last_frame_is_order_sensitive():
    a, b = np.array([0.9, 0.1]), np.array([0.2, 0.8])
    w1 = TemporalTextWindow(2).push(a).push(b)
    w2 = TemporalTextWindow(2).push(b).push(a)
    last = AggregationStrategy("last")
    assert not np.array_equal(aggregate(w1, last), aggregate(w2, last))


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_attention_weights_are_a_distribution(e, a):
    w = attention_weights(np.array(e), np.array(a))
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


@given(st.integers(0, 10_000), st.integers(2, 4), st.sampled_from(TAGS))
def test_constant_buffer_interval_matches_every_frame(seed, k, tag):
    rng = np.random.default_rng(seed)
    e, s = _prob(rng), _prob(rng)
    fast, slow = TemporalTextWindow(3), TemporalTextWindow(3, update_interval=k)
    for _ in range(3):
        fast.push(s)
        slow.push(s)
    # from here on the buffer holds identical contents every frame
    for _ in range(7):
        fast.push(s)
        slow.push(s)
        assert np.array_equal(update(e, fast, AggregationStrategy(tag)), update(e, slow, AggregationStrategy(tag)))
