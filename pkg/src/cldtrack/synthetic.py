"""Synthetic moving-square sequences and the training pairs cut from them."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .encoders import ImagePatch
from .fusion import extract_features
from .geometry import BBox, context_window, crop_and_resize
from .losses import LossConfig
from .model import TrainBatch, targets_for_boxes
from .tracker import TrackerConfig


def moving_square_sequence(n_frames: int = 64, size: int = 128, seed: int = 0,
                           target: int = 20, color=(0.9, 0.15, 0.1),
                           speed: float = 1.5) -> tuple[list[np.ndarray], list[BBox]]:
    """A coloured square drifting over a smooth textured background."""
    rng = np.random.default_rng([seed, 0x5EC])
    noise = rng.standard_normal((size, size, 3))
    background = 0.5 + 0.5 * ndimage.gaussian_filter(noise, sigma=(6, 6, 0))
    background = np.clip(0.25 + 0.5 * background * np.array([0.8, 1.0, 0.9]), 0.0, 1.0)

    margin = target / 2.0 + 4.0
    lo, hi = margin, size - margin
    pos = rng.uniform(lo + 10, hi - 10, size=2)
    angle = rng.uniform(0, 2 * math.pi)
    vel = speed * np.array([math.cos(angle), math.sin(angle)])

    frames, boxes = [], []
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    col = np.asarray(color, dtype=np.float64)
    for _ in range(n_frames):
        box = BBox.from_center(pos[0], pos[1], float(target), float(target))
        inside = ((xx >= box.x) & (xx < box.x + box.w) & (yy >= box.y) & (yy < box.y + box.h))
        frame = background.copy()
        frame[inside] = col
        frame += rng.normal(0.0, 0.01, frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
        boxes.append(box)
        # bounce off the margins, with a little heading noise
        vel = vel + rng.normal(0.0, 0.1, 2)
        vel *= speed / max(np.linalg.norm(vel), 1e-9)
        nxt = pos + vel
        for k in range(2):
            if not lo <= nxt[k] <= hi:
                vel[k] = -vel[k]
        pos = np.clip(pos + vel, lo, hi)
    return frames, boxes


def training_batch(frames, boxes, backend, bag: np.ndarray, cfg: TrackerConfig, n_samples: int,
                   seed: int = 0, shift: float = 0.3, scale_jitter: float = 0.1,
                   loss_cfg: LossConfig = LossConfig()) -> TrainBatch:
    """Exemplar from frame 0; search crops around jittered copies of later boxes."""
    rng = np.random.default_rng([seed, 0x7A1])
    exemplar = ImagePatch(crop_and_resize(frames[0], context_window(boxes[0], cfg.exemplar_area_factor,
                                                                    cfg.exemplar_size)))
    ex_feat = backend.encode_image(exemplar)
    fmaps, s_feats, gt = [], [], []
    for _ in range(n_samples):
        t = int(rng.integers(0, len(frames)))
        box = boxes[t]
        side = math.sqrt(box.area)
        cx, cy = box.center
        cx += rng.uniform(-shift, shift) * side
        cy += rng.uniform(-shift, shift) * side
        s = math.exp(rng.uniform(-scale_jitter, scale_jitter))
        prev = BBox.from_center(cx, cy, box.w * s, box.h * s)
        win = context_window(prev, cfg.search_area_factor, cfg.search_size)
        search = ImagePatch(crop_and_resize(frames[t], win))
        fmaps.append(extract_features(backend, exemplar, search, cfg.geometry, exemplar_feat=ex_feat))
        s_feats.append(backend.encode_image(search))
        crop_box = win.to_crop(box)
        gt.append(np.array(crop_box.as_tuple()) / cfg.search_size)
    gt = np.stack(gt)
    targets, cells = targets_for_boxes(gt, cfg.grid, loss_cfg.sigma)
    return TrainBatch(np.stack(fmaps), np.repeat(ex_feat[None], n_samples, axis=0), np.stack(s_feats),
                      np.asarray(bag, dtype=np.float64), gt, targets, cells)
