"""Joint image/text encoder interface and the deterministic offline stub.

The tracker only relies on three properties of its encoders: determinism,
unit-norm outputs and graded similarity. :class:`StubBackend` provides exactly
those without any model weights; :class:`CallableBackend` adapts any pair of
user-supplied functions (e.g. a real CLIP model) to the same interface.
"""

from __future__ import annotations

import functools
import hashlib
import re
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .embedding import l2_normalize
from .errors import DegenerateInputError, DimensionMismatchError
from .geometry import BBox

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
GRID = 4


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """An ``H x W x Ch`` image with intensities in ``[0, 1]`` and an optional target box."""

    pixels: np.ndarray
    bbox: BBox | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or min(px.shape) == 0:
            raise DegenerateInputError(f"image patch must be non-empty HxWxC, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise DegenerateInputError("image patch has non-finite pixels")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.bbox is not None:
            b = self.bbox
            h, w = px.shape[:2]
            if b.x < 0 or b.y < 0 or b.x + b.w > w or b.y + b.h > h:
                raise DegenerateInputError(f"bbox {b.as_tuple()} lies outside the {w}x{h} image")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def digest(self) -> str:
        return image_digest(self.pixels)


def image_digest(pixels: np.ndarray) -> str:
    """64-bit hex digest of the pixel buffer (shape-aware)."""
    arr = np.ascontiguousarray(np.asarray(pixels, dtype=np.float64))
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@runtime_checkable
class EncoderBackend(Protocol):
    embed_dim: int
    tag: str

    def encode_text(self, text: str) -> np.ndarray: ...

    def encode_image(self, patch: ImagePatch) -> np.ndarray: ...


def encode_text(backend: EncoderBackend, text: str) -> np.ndarray:
    if not isinstance(text, str) or not text.strip():
        raise DegenerateInputError("cannot encode empty text")
    return backend.encode_text(text)


def encode_image(backend: EncoderBackend, patch: ImagePatch) -> np.ndarray:
    return backend.encode_image(patch)


def encode_texts(backend: EncoderBackend, texts) -> np.ndarray:
    return np.stack([encode_text(backend, t) for t in texts])


@functools.lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int, buckets: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{token}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    idx = rng.choice(dim, size=min(buckets, dim), replace=False)
    v = np.zeros(dim)
    v[idx] = 1.0
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


@functools.lru_cache(maxsize=64)
def _projection(dim: int, n_in: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, dim, n_in, 0x1A6E])
    m = rng.standard_normal((dim, n_in)) / np.sqrt(n_in)
    m.setflags(write=False)
    return m


def _cell_edges(n: int) -> list[tuple[int, int]]:
    edges = []
    for i in range(GRID):
        lo = min((i * n) // GRID, n - 1)
        hi = max(((i + 1) * n) // GRID, lo + 1)
        edges.append((lo, hi))
    return edges


def pooled_statistics(batch: np.ndarray) -> np.ndarray:
    """Per-cell channel means and variances over a 4x4 grid, plus a constant term.

    ``batch`` is ``N x H x W x Ch``; returns ``N x (1 + 2 * 16 * Ch)``.
    """
    n, h, w, ch = batch.shape
    means, variances = [], []
    for r0, r1 in _cell_edges(h):
        for c0, c1 in _cell_edges(w):
            cell = batch[:, r0:r1, c0:c1, :]
            means.append(cell.mean(axis=(1, 2)))
            variances.append(cell.var(axis=(1, 2)))
    return np.concatenate([np.ones((n, 1))] + means + variances, axis=1)


class StubBackend:
    """Deterministic stand-in for a joint image/text embedding model.

    Text: each distinct token hashes (with the seed) to a fixed mixture of
    ``buckets`` basis vectors; the token vectors are averaged and renormalized,
    so texts sharing tokens are more similar. Image: pooled 4x4-grid channel
    statistics projected by a fixed seeded Gaussian matrix. The patch bbox is
    ignored by the image stub.
    """

    tag = "stub"

    def __init__(self, dim: int = 32, seed: int = 0, buckets: int = 2):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.embed_dim = int(dim)
        self.seed = int(seed)
        self.buckets = int(buckets)

    def __repr__(self):
        return f"StubBackend(dim={self.embed_dim}, seed={self.seed}, buckets={self.buckets})"

    def token_vector(self, token: str) -> np.ndarray:
        """Unit basis mixture assigned to one (lower-cased) token."""
        return _token_vector(token.lower(), self.embed_dim, self.seed, self.buckets)

    def encode_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise DegenerateInputError("cannot encode empty text")
        tokens = sorted(set(tokenize(text)))
        if not tokens:
            raise DegenerateInputError(f"text {text!r} has no tokens")
        acc = np.zeros(self.embed_dim)
        for tok in tokens:
            acc += _token_vector(tok, self.embed_dim, self.seed, self.buckets)
        return l2_normalize(acc / len(tokens))

    def encode_image(self, patch: ImagePatch) -> np.ndarray:
        px = patch.pixels if isinstance(patch, ImagePatch) else ImagePatch(patch).pixels
        return self.encode_image_batch(px[None])[0]

    def encode_image_batch(self, batch: np.ndarray) -> np.ndarray:
        """Encode ``N`` equally sized images at once (``N x H x W x Ch``)."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or min(batch.shape) == 0:
            raise DegenerateInputError(f"expected a non-empty NxHxWxC batch, got {batch.shape}")
        stats = pooled_statistics(batch)
        proj = _projection(self.embed_dim, stats.shape[1], self.seed)
        out = stats @ proj.T
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("image embedding collapsed to zero")
        return out / norms


class CallableBackend:
    """Adapter for external encoders: any ``text -> vector`` and ``pixels -> vector`` pair."""

    tag = "external"

    def __init__(self, text_fn: Callable[[str], np.ndarray],
                 image_fn: Callable[[np.ndarray], np.ndarray], dim: int):
        self._text_fn = text_fn
        self._image_fn = image_fn
        self.embed_dim = int(dim)

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.embed_dim:
            raise DimensionMismatchError(f"external encoder returned dim {v.shape[0]}, expected {self.embed_dim}")
        return l2_normalize(v)

    def encode_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise DegenerateInputError("cannot encode empty text")
        return self._check(self._text_fn(text))

    def encode_image(self, patch: ImagePatch) -> np.ndarray:
        return self._check(self._image_fn(patch.pixels))

    def encode_image_batch(self, batch: np.ndarray) -> np.ndarray:
        return np.stack([self._check(self._image_fn(b)) for b in batch])
