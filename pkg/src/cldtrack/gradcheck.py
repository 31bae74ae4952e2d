"""Analytic-versus-finite-difference gradient comparison on small seeded problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import init_adapter
from .head import init_head
from .losses import LossConfig, finite_diff_grad, relative_error
from .model import ModelParams, TrainBatch, forward_backward, loss_fn, targets_for_boxes


@dataclass
class PointResult:
    seed: int
    n_params: int
    max_rel_error: float
    per_group: dict[str, float]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_problem(seed: int, dim: int = 4, grid: int = 6, batch: int = 2, bag_size: int = 5,
                 channels: int = 4, stages: int = 4, n_context: int = 3,
                 loss_cfg: LossConfig = LossConfig()) -> tuple[ModelParams, TrainBatch]:
    """Random features, bag, boxes and parameters. The adapter is initialized
    with a large scale and a warm temperature so its gradients are not negligible."""
    rng = np.random.default_rng([seed, 0x6C])
    centers = rng.uniform(0.25, 0.75, (batch, 2))
    sizes = rng.uniform(0.15, 0.45, (batch, 2))
    boxes = np.concatenate([centers - sizes / 2, sizes], axis=1)
    targets, cells = targets_for_boxes(boxes, grid, loss_cfg.sigma)
    tb = TrainBatch(rng.normal(size=(batch, dim, grid, grid)), _unit(rng.normal(size=(batch, dim))),
                    _unit(rng.normal(size=(batch, dim))), _unit(rng.normal(size=(bag_size, dim))),
                    boxes, targets, cells)
    head = init_head(dim, channels, stages, seed=seed)
    adapter = init_adapter(dim, n_context, seed=seed, scale=0.5, tau_temp=0.5)
    return ModelParams(head, adapter), tb


def check_point(params: ModelParams, batch: TrainBatch, epsilon: float = 1e-5, floor: float = 1e-6,
                loss_cfg: LossConfig = LossConfig(), corrupt: float = 0.0, seed: int = 0) -> PointResult:
    """``corrupt`` adds that amount to one analytic component (a negative control)."""
    _, _, grads = forward_backward(params, batch, loss_cfg)
    analytic = params.grad_vector(grads)
    if corrupt:
        analytic = analytic.copy()
        analytic[int(np.argmax(np.abs(analytic)))] += corrupt
    numeric = finite_diff_grad(loss_fn(params, batch, loss_cfg), params.to_vector(), epsilon)
    err = relative_error(analytic, numeric, floor)
    per_group, i = {}, 0
    for name, arr in params.arrays().items():
        per_group[name] = float(err[i:i + arr.size].max())
        i += arr.size
    return PointResult(seed, analytic.size, float(err.max()), per_group)


def run_gradcheck(points: int = 5, seed: int = 0, epsilon: float = 1e-5, floor: float = 1e-6,
                  corrupt: float = 0.0, loss_cfg: LossConfig = LossConfig(), **problem) -> list[PointResult]:
    out = []
    for k in range(points):
        params, batch = make_problem(seed + k, loss_cfg=loss_cfg, **problem)
        out.append(check_point(params, batch, epsilon, floor, loss_cfg, corrupt, seed + k))
    return out
