"""Temporal update of the exemplar text feature from a window of past search-text features.

``W_att = softmax(-|t_e - agg(window)|)`` and ``T_att = W_att * t_e`` (element-wise).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .embedding import as_vector, softmax
from .errors import DegenerateInputError, DimensionMismatchError

STRATEGIES = ("average", "last", "max", "weighted")


def decay_weights(n: int, decay: float = 0.5) -> np.ndarray:
    """Normalized exponential weights for ``n`` frames, oldest first, newest heaviest."""
    if n < 1:
        raise ValueError("need at least one weight")
    w = decay ** np.arange(n - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


@dataclass(frozen=True)
class AggregationStrategy:
    tag: str = "average"
    weights: tuple[float, ...] | None = None  # oldest first; only for "weighted"
    decay: float = 0.5

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ValueError(f"unknown aggregation strategy {self.tag!r}; choose from {STRATEGIES}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("decay weights must be positive and sum to 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def weights_for(self, n: int) -> np.ndarray:
        if self.weights is None:
            return decay_weights(n, self.decay)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape[0] != n:
            raise DimensionMismatchError(f"{w.shape[0]} decay weights for a buffer of {n}")
        return w


class TemporalTextWindow:
    """Ring buffer of the last ``capacity`` search-text features plus cached attention weights."""

    def __init__(self, capacity: int = 5, update_interval: int = 1):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        if update_interval < 1:
            raise ValueError("update interval must be >= 1")
        self.capacity = int(capacity)
        self.update_interval = int(update_interval)
        self.buffer: deque[np.ndarray] = deque(maxlen=self.capacity)
        self.frame_counter = 0
        self.cached_weights: np.ndarray | None = None

    def __len__(self):
        return len(self.buffer)

    @property
    def dim(self) -> int | None:
        return self.buffer[0].shape[0] if self.buffer else None

    def push(self, t_s) -> "TemporalTextWindow":
        v = as_vector(t_s, "t_s")
        if self.buffer and v.shape[0] != self.dim:
            raise DimensionMismatchError(f"pushed dim {v.shape[0]}, window holds dim {self.dim}")
        self.buffer.append(v)
        self.frame_counter += 1
        return self

    def contents(self) -> np.ndarray:
        return np.stack(list(self.buffer))


def push(window: TemporalTextWindow, t_s) -> TemporalTextWindow:
    return window.push(t_s)


def aggregate(window: TemporalTextWindow, strategy: AggregationStrategy = AggregationStrategy()) -> np.ndarray:
    if not len(window):
        raise DegenerateInputError("cannot aggregate an empty window")
    buf = window.contents()
    if strategy.tag == "average":
        # exactly rounded column sums, so the result cannot depend on buffer order
        return np.array([math.fsum(col) for col in buf.T]) / buf.shape[0]
    if strategy.tag == "last":
        return buf[-1].copy()
    if strategy.tag == "max":
        return buf.max(axis=0)
    return strategy.weights_for(buf.shape[0]) @ buf


def attention_weights(t_e, agg) -> np.ndarray:
    e = as_vector(t_e, "t_e")
    a = as_vector(agg, "agg")
    if e.shape != a.shape:
        raise DimensionMismatchError(f"dimension mismatch: {e.shape[0]} vs {a.shape[0]}")
    return softmax(-np.abs(e - a))


def modulate(weights: np.ndarray, t_e: np.ndarray) -> np.ndarray:
    """Combine attention weights with the exemplar feature (element-wise product)."""
    return weights * t_e


def update(t_e, window: TemporalTextWindow, strategy: AggregationStrategy = AggregationStrategy()) -> np.ndarray:
    """Attention-modulated exemplar text feature for the current frame.

    Weights are recomputed when the frame counter is a multiple of the update
    interval and reused otherwise. With nothing buffered and nothing cached the
    weights are uniform.
    """
    e = as_vector(t_e, "t_e")
    due = window.frame_counter % window.update_interval == 0
    if len(window) and (due or window.cached_weights is None):
        window.cached_weights = attention_weights(e, aggregate(window, strategy))
    if window.cached_weights is None:
        return modulate(np.full(e.shape[0], 1.0 / e.shape[0]), e)
    if window.cached_weights.shape != e.shape:
        raise DimensionMismatchError("cached weights do not match the exemplar dimension")
    return modulate(window.cached_weights, e)
