"""SGD with momentum and the warmup + polynomial learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from gated_scd.errors import ContractError, ShapeError, TrainingError
from gated_scd.models import PrecisionMode
from gated_scd.tensor import GradReport

logger = logging.getLogger(__name__)


class ScheduleSettings(Protocol):
    lr_peak: float
    lr_floor: float
    warmup_fraction: float
    poly_power: float


class OptimizerSettings(Protocol):
    momentum: float
    weight_decay: float
    precision: PrecisionMode


@dataclass
class TrainState:
    """Everything the optimizer carries between steps."""

    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_fscd: float = -1.0
    skipped_steps: int = 0

    def __post_init__(self) -> None:
        if not self.momentum:
            self.momentum = {k: np.zeros_like(v) for k, v in self.params.items()}
        for name, buf in self.momentum.items():
            if buf.shape != self.params[name].shape:
                raise ShapeError(f"momentum buffer {name} has shape {buf.shape}")


def lr_schedule(step: int, total_steps: int, cfg: ScheduleSettings) -> float:
    """Linear warmup over the first warmup_fraction of steps, then poly decay."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside 0..{total_steps}")
    warmup = math.floor(cfg.warmup_fraction * total_steps)
    if warmup >= total_steps:
        raise ContractError(f"{total_steps} total steps leave no decay phase after "
                            f"{warmup} warmup steps")
    if step < warmup:
        return cfg.lr_peak * (step + 1) / warmup
    t = (step - warmup) / (total_steps - warmup)
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * (1.0 - t) ** cfg.poly_power


def sgd_step(
    state: TrainState, grads: GradReport, lr: float, cfg: OptimizerSettings
) -> TrainState:
    """One momentum step: g' = g + wd·p, buf = μ·buf + g', p -= lr·buf.

    Gradients are first rescaled so their global L2 norm is at most
    precision.grad_clip. A non-finite gradient skips the step under emulated
    binary16 and aborts otherwise.
    """
    if grads.nonfinite_count:
        if cfg.precision.is_fp16:
            logger.warning("step %d: %d non-finite gradient values, update skipped",
                           state.step, grads.nonfinite_count)
            return replace(state, step=state.step + 1, skipped_steps=state.skipped_steps + 1)
        raise TrainingError(
            f"step {state.step}: {grads.nonfinite_count} non-finite gradient values"
        )

    factor = 1.0
    clip = cfg.precision.grad_clip
    if clip is not None:
        norm = grads.global_norm()
        if norm > clip:
            factor = clip / norm
            logger.debug("step %d: clipped grad norm %.4g to %.4g", state.step, norm, clip)

    params, buffers = {}, {}
    for name, p in state.params.items():
        g = grads.grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter {p.shape}")
        g = g * factor + cfg.weight_decay * p
        buf = cfg.momentum * state.momentum[name] + g
        buffers[name] = buf
        params[name] = p - lr * buf
    return replace(state, params=params, momentum=buffers, step=state.step + 1)
