"""Boxes and image crops.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in pixels, on a
continuous coordinate system: pixel ``i`` covers ``[i, i + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateInputError(f"non-finite box {vals}")
        if not (self.w > 0 and self.h > 0):
            raise DegenerateInputError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def to_line(self) -> str:
        return ",".join(_fmt(v) for v in self.as_tuple())


def _fmt(v: float) -> str:
    return repr(float(v))


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    return max(0.0, iw) * max(0.0, ih)


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def center_error(pred: BBox, gt: BBox) -> float:
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot(px - gx, py - gy)


@dataclass(frozen=True)
class CropWindow:
    """Square region of a frame that was resampled to ``out_size`` pixels."""

    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        """Frame pixels per crop pixel."""
        return self.side / self.out_size

    def to_frame(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(self.x0 + box.x * s, self.y0 + box.y * s, box.w * s, box.h * s)

    def to_crop(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x - self.x0) / s, (box.y - self.y0) / s, box.w / s, box.h / s)


def context_window(box: BBox, area_factor: float, out_size: int,
                   center: tuple[float, float] | None = None) -> CropWindow:
    """Square crop whose area is ``area_factor`` times the box area."""
    side = math.sqrt(area_factor * box.area)
    cx, cy = box.center if center is None else center
    return CropWindow(cx - side / 2.0, cy - side / 2.0, side, int(out_size))


def crop_and_resize(image: np.ndarray, window: CropWindow) -> np.ndarray:
    """Bilinear resample of a square frame region; outside pixels take the frame mean colour."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    n = window.out_size
    s = window.scale
    # sample at crop pixel centres, mapped back to frame pixel-centre coordinates
    coords = window.x0 + (np.arange(n) + 0.5) * s - 0.5
    rows = window.y0 + (np.arange(n) + 0.5) * s - 0.5
    rr, cc = np.meshgrid(rows, coords, indexing="ij")
    out = np.empty((n, n, img.shape[2]))
    for ch in range(img.shape[2]):
        fill = float(img[:, :, ch].mean())
        out[:, :, ch] = ndimage.map_coordinates(img[:, :, ch], [rr, cc], order=1,
                                                mode="constant", cval=fill)
    return out


def clip_box(box: BBox, width: int, height: int, min_size: float = 4.0) -> BBox:
    """Keep the box centre inside the frame and its size within sane bounds."""
    cx, cy = box.center
    cx = min(max(cx, 0.0), float(width))
    cy = min(max(cy, 0.0), float(height))
    w = min(max(box.w, min_size), float(width))
    h = min(max(box.h, min_size), float(height))
    return BBox.from_center(cx, cy, w, h)


def draw_box(image: np.ndarray, box: BBox, color=(1.0, 0.0, 0.0), thickness: int = 2) -> np.ndarray:
    """Return a copy of ``image`` with a box outline burned into the pixels."""
    img = np.array(image, dtype=np.float64, copy=True)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    x0 = int(np.clip(math.floor(box.x), 0, w - 1))
    y0 = int(np.clip(math.floor(box.y), 0, h - 1))
    x1 = int(np.clip(math.ceil(box.x + box.w) - 1, 0, w - 1))
    y1 = int(np.clip(math.ceil(box.y + box.h) - 1, 0, h - 1))
    col = np.asarray(color, dtype=np.float64)[: img.shape[2]]
    t = thickness
    img[y0:min(y0 + t, y1 + 1), x0:x1 + 1] = col
    img[max(y1 - t + 1, y0):y1 + 1, x0:x1 + 1] = col
    img[y0:y1 + 1, x0:min(x0 + t, x1 + 1)] = col
    img[y0:y1 + 1, max(x1 - t + 1, x0):x1 + 1] = col
    return img
