"""Visual feature maps, text-conditioned correlation, state decoding and the
Hanning-window score penalty."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .embedding import as_vector
from .encoders import EncoderBackend, ImagePatch
from .errors import DegenerateInputError, DimensionMismatchError
from .geometry import BBox
from .head import HeadParams, head_forward


@dataclass(frozen=True)
class SearchGeometry:
    size: int = 384   # search crop side, pixels
    grid: int = 16    # score map side, cells

    @property
    def stride(self) -> float:
        return self.size / self.grid


@dataclass(frozen=True, eq=False)
class PredictionMaps:
    cls: np.ndarray     # 1 x H x W, in [0, 1]
    offset: np.ndarray  # 2 x H x W, (x, y) in cell units
    size: np.ndarray    # 2 x H x W, (w, h) as fractions of the search side

    def __post_init__(self):
        if self.cls.ndim != 3 or self.cls.shape[0] != 1:
            raise DimensionMismatchError(f"cls map must be 1 x H x W, got {self.cls.shape}")
        hw = self.cls.shape[1:]
        if self.offset.shape != (2, *hw) or self.size.shape != (2, *hw):
            raise DimensionMismatchError("offset/size maps must be 2 x H x W matching cls")


def check_feature_map(fmap) -> np.ndarray:
    arr = np.asarray(fmap, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) == 0:
        raise DimensionMismatchError(f"feature map must be D x H x W, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError("feature map has non-finite entries")
    return arr


@functools.lru_cache(maxsize=16)
def _fusion_matrix(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, dim, 0xF05E])
    m = rng.standard_normal((dim, 2 * dim)) / np.sqrt(2.0)
    m.setflags(write=False)
    return m


def patchify(pixels: np.ndarray, grid: int) -> np.ndarray:
    """Split an ``S x S x C`` image into ``grid*grid`` patches, row-major."""
    s, s2, ch = pixels.shape
    p = s // grid
    return (pixels.reshape(grid, p, grid, p, ch).transpose(0, 2, 1, 3, 4).reshape(grid * grid, p, p, ch))


def extract_features(backend: EncoderBackend, exemplar: ImagePatch, search: ImagePatch,
                     geometry: SearchGeometry = SearchGeometry(), exemplar_size: int | None = None,
                     exemplar_feat: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Stand-in joint backbone: every search patch is embedded, concatenated with
    the exemplar embedding and mixed by a fixed seeded matrix. Returns ``D x G x G``.
    """
    s = search.pixels
    if s.shape[0] != geometry.size or s.shape[1] != geometry.size:
        raise DimensionMismatchError(f"search patch is {s.shape[1]}x{s.shape[0]}, config expects {geometry.size}")
    if geometry.size % geometry.grid:
        raise DimensionMismatchError(f"search size {geometry.size} is not divisible by grid {geometry.grid}")
    if exemplar_size is not None and exemplar.pixels.shape[:2] != (exemplar_size, exemplar_size):
        raise DimensionMismatchError(f"exemplar patch is {exemplar.pixels.shape[:2]}, config expects {exemplar_size}")
    ex = backend.encode_image(exemplar) if exemplar_feat is None else exemplar_feat
    patches = patchify(s, geometry.grid)
    if hasattr(backend, "encode_image_batch"):
        emb = backend.encode_image_batch(patches)
    else:
        emb = np.stack([backend.encode_image(ImagePatch(p)) for p in patches])
    d = emb.shape[1]
    joint = np.concatenate([emb, np.broadcast_to(ex, emb.shape)], axis=1)
    feats = joint @ _fusion_matrix(d, seed).T
    return feats.T.reshape(d, geometry.grid, geometry.grid)


def correlate(fmap, t_att) -> np.ndarray:
    """Per-channel modulation ``(1 + t_att[c]) * fmap[c]`` (1x1 depthwise convolution)."""
    f = check_feature_map(fmap)
    t = as_vector(t_att, "t_att")
    if t.shape[0] != f.shape[0]:
        raise DimensionMismatchError(f"text dim {t.shape[0]} != feature channels {f.shape[0]}")
    return (1.0 + t)[:, None, None] * f


def predict_maps(corr, params: HeadParams) -> PredictionMaps:
    f = check_feature_map(corr)
    maps = head_forward(f[None], params)
    return PredictionMaps(maps["cls"][0], maps["offset"][0], maps["size"][0])


def peak_cell(score: np.ndarray) -> tuple[int, int]:
    """(row, col) of the maximum; ties go to the lowest row-major index."""
    flat = int(np.argmax(score))
    return divmod(flat, score.shape[-1])


def decode_state(maps: PredictionMaps, geometry: SearchGeometry, score: np.ndarray | None = None) -> BBox:
    """Box in search-crop pixels: centre = (cell + offset) * stride, size = fraction * side.

    ``score`` overrides the map used to pick the peak (e.g. a window-penalized one).
    """
    sc = maps.cls[0] if score is None else np.asarray(score)
    r, c = peak_cell(sc)
    stride = geometry.size / sc.shape[1]
    cx = (c + maps.offset[0, r, c]) * stride
    cy = (r + maps.offset[1, r, c]) * stride
    w = maps.size[0, r, c] * geometry.size
    h = maps.size[1, r, c] * geometry.size
    return BBox.from_center(cx, cy, w, h)


def hann_1d(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    # evaluate the lower half only and mirror it so the window is exactly symmetric
    i = np.minimum(np.arange(n), n - 1 - np.arange(n))
    return 0.5 * (1.0 - np.cos(2.0 * math.pi * i / (n - 1)))


def hanning_window(h: int, w: int) -> np.ndarray:
    return np.outer(hann_1d(h), hann_1d(w))


def apply_window_penalty(scores, window, w_mix: float = 0.49) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    win = np.asarray(window, dtype=np.float64)
    if s.shape != win.shape:
        raise DimensionMismatchError(f"score map {s.shape} and window {win.shape} differ")
    if not 0.0 <= w_mix <= 1.0:
        raise ValueError(f"w_mix must lie in [0, 1], got {w_mix}")
    return (1.0 - w_mix) * s + w_mix * win
