"""Vector math shared by every stage: normalization, cosine similarity, softmax, argmax.

Feature vectors and probability vectors are plain 1-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError

__all__ = [
    "as_vector",
    "l2_normalize",
    "cosine_sim",
    "cosine_sims",
    "softmax",
    "argmax",
]


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} has non-finite entries")
    return arr


def _rescaled(arr: np.ndarray) -> np.ndarray | None:
    """``arr`` divided by its largest magnitude (None for the zero vector), so
    squaring neither underflows tiny inputs nor overflows huge ones."""
    m = np.max(np.abs(arr), axis=-1, keepdims=True)
    if np.any(m == 0.0):
        return None
    return arr / m


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises DegenerateInputError for the zero vector instead of returning NaNs.
    """
    arr = _rescaled(as_vector(v))
    if arr is None:
        raise DegenerateInputError("cannot normalize the zero vector")
    return arr / np.linalg.norm(arr)


def cosine_sim(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(cosine_sims(a, b[None])[0])


def cosine_sims(query, rows) -> np.ndarray:
    """Cosine similarity of ``query`` against every row of a matrix."""
    q = as_vector(query, "query")
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise DegenerateInputError("rows must be a non-empty 2-D matrix")
    if m.shape[1] != q.shape[0]:
        raise DimensionMismatchError(f"dimension mismatch: {q.shape[0]} vs {m.shape[1]}")
    q, m = _rescaled(q), _rescaled(m)
    if q is None or m is None:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    # row-wise reductions rather than a matrix product, so a row's value does not
    # depend on how many other rows share the call; rounding can push |s| past 1
    dots = (m * q).sum(axis=1)
    return np.clip(dots / (np.sqrt((m * m).sum(axis=1)) * np.sqrt((q * q).sum())), -1.0, 1.0)


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = as_vector(scores, "scores") / temperature
    e = np.exp(s - s.max())
    # correctly rounded sum: the result does not depend on entry order
    return e / math.fsum(e)


def argmax(scores) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DegenerateInputError("argmax of an empty vector")
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(s))
