"""Per-sequence tracking session tying the text and visual branches together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ttfum
from .adapter import select_description
from .encoders import EncoderBackend, ImagePatch
from .errors import SessionError
from .fusion import (SearchGeometry, apply_window_penalty, correlate, decode_state, extract_features,
                     hanning_window, predict_maps)
from .geometry import BBox, clip_box, context_window, crop_and_resize
from .model import ModelParams


@dataclass(frozen=True)
class TrackerConfig:
    search_size: int = 384
    exemplar_size: int = 192
    search_area_factor: float = 4.0
    exemplar_area_factor: float = 2.0
    grid: int = 16
    hanning_weight: float = 0.49
    window_size: int = 5
    strategy: str = "average"
    update_interval: int = 1
    decay: float = 0.5

    @property
    def geometry(self) -> SearchGeometry:
        return SearchGeometry(self.search_size, self.grid)


class TrackingSession:
    """Single-owner, sequential tracker state for one video."""

    def __init__(self, backend: EncoderBackend, bag, params: ModelParams, cfg: TrackerConfig = TrackerConfig()):
        self.backend = backend
        self.bag = np.asarray(bag.embeddings if hasattr(bag, "embeddings") else bag, dtype=np.float64)
        self.params = params
        self.cfg = cfg
        self.strategy = ttfum.AggregationStrategy(cfg.strategy, decay=cfg.decay)
        self.window_map = hanning_window(cfg.grid, cfg.grid)
        self.prev_box: BBox | None = None
        self.last: dict = {}

    @property
    def initialized(self) -> bool:
        return self.prev_box is not None

    def initialize(self, frame: np.ndarray, box: BBox) -> None:
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float64)
        win = context_window(box, cfg.exemplar_area_factor, cfg.exemplar_size)
        self.exemplar = ImagePatch(crop_and_resize(frame, win))
        self.exemplar_feat = self.backend.encode_image(self.exemplar)
        self.exemplar_text = select_description(self.exemplar_feat, self.bag, self.params.adapter)
        self.window = ttfum.TemporalTextWindow(cfg.window_size, cfg.update_interval)
        self.prev_box = box
        self.frame_shape = frame.shape[:2]

    def track(self, frame: np.ndarray) -> BBox:
        if not self.initialized:
            raise SessionError("session must be initialized with the first frame before tracking")
        cfg = self.cfg
        frame = np.asarray(frame, dtype=np.float64)
        win = context_window(self.prev_box, cfg.search_area_factor, cfg.search_size)
        search = ImagePatch(crop_and_resize(frame, win))
        search_feat = self.backend.encode_image(search)
        chosen = select_description(search_feat, self.bag, self.params.adapter)
        self.window.push(chosen.projected)
        t_att = ttfum.update(self.exemplar_text.projected, self.window, self.strategy)

        fmap = extract_features(self.backend, self.exemplar, search, cfg.geometry,
                                exemplar_feat=self.exemplar_feat)
        maps = predict_maps(correlate(fmap, t_att), self.params.head)
        score = apply_window_penalty(maps.cls[0], self.window_map, cfg.hanning_weight)
        box_crop = decode_state(maps, cfg.geometry, score)
        h, w = frame.shape[:2]
        box = clip_box(win.to_frame(box_crop), w, h)
        self.last = {"maps": maps, "score": score, "crop": win, "text_index": chosen.index}
        self.prev_box = box
        return box


def track_frame(session: TrackingSession, frame: np.ndarray) -> BBox:
    return session.track(frame)
