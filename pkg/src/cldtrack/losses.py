"""Tracking losses (focal classification, GIoU, L1), their gradients, and a
central-difference gradient estimator used to verify them."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError
from .geometry import BBox

FOCAL_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    sigma: float = 1.0  # Gaussian target radius, cells

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be non-negative")


# ablation grid over the two regression weights; the defaults sit at (2, 5)
LAMBDA_IOU_GRID = (0.5, 1.0, 2.0, 3.0)
LAMBDA_L1_GRID = (1.0, 2.5, 5.0, 7.5)


def lambda_sweep_grid(base: LossConfig = LossConfig()) -> list[LossConfig]:
    """Every (lambda_iou, lambda_l1) combination of the ablation grid, iou-major."""
    return [dataclasses.replace(base, lambda_iou=a, lambda_l1=b) for a in LAMBDA_IOU_GRID for b in LAMBDA_L1_GRID]


def _box_array(b) -> np.ndarray:
    if isinstance(b, BBox):
        return np.array(b.as_tuple(), dtype=np.float64)
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape != (4,):
        raise DimensionMismatchError("box must have 4 coordinates")
    if not (arr[2] > 0 and arr[3] > 0):
        raise DegenerateInputError("box extents must be positive")
    return arr


def giou_loss_grad(pred, gt) -> tuple[float, np.ndarray]:
    """``1 - GIoU`` for ``(x, y, w, h)`` boxes and its gradient w.r.t. ``pred``."""
    p, g = _box_array(pred), _box_array(gt)
    px1, py1, pw, ph = p
    gx1, gy1, gw, gh = g
    px2, py2, gx2, gy2 = px1 + pw, py1 + ph, gx1 + gw, gy1 + gh

    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    iwp, ihp = max(iw, 0.0), max(ih, 0.0)
    inter = iwp * ihp
    # areas from corner differences so identical boxes give exactly zero loss
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    cw = max(px2, gx2) - min(px1, gx1)
    chh = max(py2, gy2) - min(py1, gy1)
    hull = cw * chh
    loss = 2.0 - inter / union - union / hull

    d_union = inter / union ** 2 - 1.0 / hull          # holding inter fixed
    d_inter = -1.0 / union - d_union                   # union shrinks as inter grows
    d_hull = union / hull ** 2
    d_iw = d_inter * ihp * (iw > 0)
    d_ih = d_inter * iwp * (ih > 0)

    g_x1 = -d_iw * (px1 > gx1) - d_hull * chh * (px1 < gx1)
    g_x2 = d_iw * (px2 < gx2) + d_hull * chh * (px2 > gx2)
    g_y1 = -d_ih * (py1 > gy1) - d_hull * cw * (py1 < gy1)
    g_y2 = d_ih * (py2 < gy2) + d_hull * cw * (py2 > gy2)
    grad = np.array([
        g_x1 + g_x2,
        g_y1 + g_y2,
        g_x2 + d_union * ph,
        g_y2 + d_union * pw,
    ])
    return float(loss), grad


def giou_loss(pred: BBox, gt: BBox) -> float:
    return giou_loss_grad(pred, gt)[0]


def l1_loss_grad(pred, gt, scale: float = 1.0) -> tuple[float, np.ndarray]:
    p = np.asarray(pred.as_tuple() if isinstance(pred, BBox) else pred, dtype=np.float64) / scale
    g = np.asarray(gt.as_tuple() if isinstance(gt, BBox) else gt, dtype=np.float64) / scale
    diff = p - g
    return float(np.abs(diff).mean()), np.sign(diff) / (4.0 * scale)


def l1_loss(pred, gt, scale: float = 1.0) -> float:
    """Mean absolute difference of the four coordinates, each divided by ``scale``."""
    return l1_loss_grad(pred, gt, scale)[0]


def focal_loss_grad(pred_cls, target_cls, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss (positives are cells where the target equals 1),
    normalized by the number of positives; returns the loss and d loss / d pred."""
    p = np.asarray(pred_cls, dtype=np.float64)
    t = np.asarray(target_cls, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionMismatchError(f"prediction {p.shape} and target {t.shape} differ")
    for name, arr in (("prediction", p), ("target", t)):
        if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} values must lie in [0, 1]")
    a, b = cfg.focal_alpha, cfg.focal_beta
    inside = (p > FOCAL_EPS) & (p < 1 - FOCAL_EPS)
    pc = np.clip(p, FOCAL_EPS, 1 - FOCAL_EPS)
    pos = t == 1.0
    n_pos = max(1, int(pos.sum()))

    pos_loss = -((1 - pc) ** a) * np.log(pc)
    neg_w = (1 - t) ** b
    neg_loss = -neg_w * pc ** a * np.log(1 - pc)
    loss = np.where(pos, pos_loss, neg_loss).sum() / n_pos

    d_pos = a * (1 - pc) ** (a - 1) * np.log(pc) - (1 - pc) ** a / pc
    d_neg = -neg_w * (a * pc ** (a - 1) * np.log(1 - pc) - pc ** a / (1 - pc))
    grad = np.where(pos, d_pos, d_neg) * inside / n_pos
    return float(loss), grad


def focal_loss(pred_cls, target_cls, cfg: LossConfig = LossConfig()) -> float:
    return focal_loss_grad(pred_cls, target_cls, cfg)[0]


def combine(cls_loss: float, iou_loss: float, l1: float, cfg: LossConfig = LossConfig()) -> float:
    """``L_cls + lambda_iou * L_iou + lambda_l1 * L_1``."""
    return cls_loss + cfg.lambda_iou * iou_loss + cfg.lambda_l1 * l1


def total_loss(pred_cls, pred_box, target_cls, gt_box, cfg: LossConfig = LossConfig(),
               box_scale: float = 1.0) -> float:
    return combine(focal_loss(pred_cls, target_cls, cfg), giou_loss(pred_box, gt_box),
                   l1_loss(pred_box, gt_box, box_scale), cfg)


def gaussian_target(grid: int, row: int, col: int, sigma: float = 1.0) -> np.ndarray:
    """Classification target: exactly 1 at (row, col) with Gaussian falloff."""
    r = np.arange(grid)[:, None] - row
    c = np.arange(grid)[None, :] - col
    return np.exp(-(r ** 2 + c ** 2) / (2.0 * sigma ** 2))


def finite_diff_grad(f: Callable[[np.ndarray], float], params, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(p + e_i eps) - f(p - e_i eps)) / (2 eps)`` per coordinate."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + epsilon
        f_plus = f(p.copy())
        p[i] = orig - epsilon
        f_minus = f(p.copy())
        p[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` per component.

    The floor keeps components whose true value sits below central-difference
    roundoff (about 1e-10 absolute at eps=1e-5) from dominating the ratio.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
