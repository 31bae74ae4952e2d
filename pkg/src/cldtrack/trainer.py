"""Plain gradient-descent trainer over the head and adapter parameters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergedError
from .losses import LossConfig
from .model import ModelParams, TrainBatch, forward_backward

log = logging.getLogger(__name__)

TAU_MIN = 1e-3
TRACE_COLUMNS = ("step", "total", "cls", "iou", "l1")


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])

    @property
    def running_min(self) -> np.ndarray:
        return np.minimum.accumulate(self.losses)

    @property
    def initial_loss(self) -> float:
        return float(self.trace[0][1])

    @property
    def final_loss(self) -> float:
        return float(self.trace[-1][1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for step, *vals in self.trace:
                w.writerow([step, *(repr(float(v)) for v in vals)])


def _row(step: int, loss: float, comp: dict) -> tuple:
    return (step, loss, comp["cls"], comp["iou"], comp["l1"])


def train_toy(params: ModelParams, batch: TrainBatch, steps: int = 2000, lr: float = 0.05,
              loss_cfg: LossConfig = LossConfig(), batch_size: int | None = None, seed: int = 0,
              clip_norm: float = 1.0, log_every: int = 0) -> TrainResult:
    """Full-batch (or seeded mini-batch) gradient descent.

    Steps are ``-lr * g`` with ``g`` rescaled to at most ``clip_norm`` in global
    L2 norm (``clip_norm <= 0`` disables the cap).

    The trace holds the loss on the full batch before every step plus once after
    the last, so it has ``steps + 1`` rows. With ``lr == 0`` parameters are returned
    unchanged.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    rng = np.random.default_rng([seed, 0x7EA])
    vec = params.to_vector()
    # position of the temperature within the flat vector
    tau_slot, offset = 0, 0
    for n, a in params.arrays().items():
        if n == "adapter.tau_temp":
            tau_slot = offset
        offset += a.size
    result = TrainResult(params)
    current = params
    for step in range(steps + 1):
        need_grad = step < steps and lr > 0
        if batch_size is None or not need_grad:
            loss, comp, grads = forward_backward(current, batch, loss_cfg, need_grad=need_grad)
        else:
            loss, comp, _ = forward_backward(current, batch, loss_cfg, need_grad=False)
            idx = rng.choice(batch.size, size=min(batch_size, batch.size), replace=False)
            _, _, grads = forward_backward(current, batch.subset(np.sort(idx)), loss_cfg)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        result.trace.append(_row(step, loss, comp))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f (cls %.4f iou %.4f l1 %.4f)", step, loss, comp["cls"], comp["iou"], comp["l1"])
        if not need_grad:
            continue
        g = current.grad_vector(grads)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(step)
        if clip_norm > 0:
            g = g * min(1.0, clip_norm / max(float(np.linalg.norm(g)), 1e-300))
        vec = vec - lr * g
        vec[tau_slot] = max(vec[tau_slot], TAU_MIN)
        current = current.with_vector(vec)
    if lr == 0 or steps == 0:
        current = params
    result.params = current
    return result
