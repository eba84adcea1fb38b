"""Binary16 emulation and the near-margin instability experiment.

Half precision is emulated by rounding float64 values through numpy.float16
(round to nearest even, subnormals kept down to 2^-24). The experiment trains
a population of feature pairs on the consistency loss alone and watches for
cliff events: activation-ratio jumps, loss excursions and overflow.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from itertools import product

import numpy as np
import pandas as pd

from gated_scd.errors import ContractError, ParameterError
from gated_scd.losses import (
    CHANGED,
    IGNORED,
    UNCHANGED,
    Consistency,
    cosine_map,
    gradient_activation_ratio,
    sc_loss,
    ssc_loss,
)
from gated_scd.models import (
    InstabilityConfig,
    LossVariant,
    Precision,
    PrecisionMode,
    StabilityTrace,
    StepRecord,
)
from gated_scd.optim import TrainState, lr_schedule, sgd_step
from gated_scd.tensor import Graph, GradReport, Node, backward

logger = logging.getLogger(__name__)

FP16_MAX = 65504.0


# =============================================================================
# Quantization
# =============================================================================


def quantize_tensor(x: np.ndarray) -> np.ndarray:
    """Round every entry to the nearest binary16 value, widened back to float64.

    Magnitudes above 65504 become ±inf; NaN propagates.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        q = x.astype(np.float16).astype(np.float64)
        q = np.where(np.abs(x) > FP16_MAX, np.copysign(np.inf, x), q)
    return q


def to_binary16(x: float) -> float:
    return float(quantize_tensor(np.array([x]))[0])


def emulated_backward(graph: Graph, loss: Node, mode: PrecisionMode) -> GradReport:
    """Gradients under the given precision mode.

    In fp16 mode the tape is replayed with every forward value quantized, the
    loss is seeded with loss_scale, every backward tensor is quantized, and the
    gradients are unscaled in full precision. Overflow shows up as
    nonfinite_count.
    """
    if not mode.is_fp16:
        return backward(graph, loss)
    graph.forward(transform=quantize_tensor)
    scaled = backward(graph, loss, seed=mode.loss_scale, transform=quantize_tensor)
    report = GradReport(
        grads={k: g / mode.loss_scale for k, g in scaled.grads.items()},
        nonfinite_count=scaled.nonfinite_count,
    )
    with np.errstate(invalid="ignore"):
        report.max_abs_grad = float(
            max((np.max(np.abs(g)) for g in report.grads.values()), default=0.0)
        )
    if report.nonfinite_count:
        logger.debug("fp16 backward produced %d non-finite values", report.nonfinite_count)
    return report


# =============================================================================
# Cliff detection
# =============================================================================


def detect_instability(
    trace: StabilityTrace | Sequence[StepRecord],
    burn_in: int,
    *,
    ratio_jump: float = 0.5,
    loss_mad_factor: float = 5.0,
    loss_jump_floor: float = 0.1,
    window: int = 20,
) -> tuple[bool, int | None]:
    """First step after burn-in showing a cliff event, if any."""
    records = trace.records if isinstance(trace, StabilityTrace) else list(trace)
    if burn_in >= len(records) and not any(r.nonfinite for r in records):
        raise ContractError(f"burn-in {burn_in} leaves nothing of a {len(records)}-step trace")
    losses = np.array([r.loss for r in records])
    for t, rec in enumerate(records):
        if rec.step <= burn_in:
            continue
        if rec.nonfinite:
            return True, rec.step
        if t == 0:
            continue
        prev = records[t - 1]
        if abs(rec.activation_ratio - prev.activation_ratio) >= ratio_jump:
            return True, rec.step
        recent = losses[max(0, t - window) : t]
        if recent.size >= 2:
            mad = float(np.median(np.abs(recent - np.median(recent))))
            delta = abs(losses[t] - losses[t - 1])
            if delta >= loss_mad_factor * mad and delta >= loss_jump_floor:
                return True, rec.step
    return False, None


# =============================================================================
# Experiment
# =============================================================================


def _population(
    cfg: InstabilityConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature pairs as (1, d, 1, P) tensors plus the (1, 1, 1, P) labels."""
    p, d, m = cfg.population, cfg.feature_dim, cfg.margin
    n_changed = min(max(round(p * cfg.changed_fraction), 1), p - 1)
    hi, lo = cfg.changed_band
    if hi <= lo:
        raise ParameterError(f"changed band ({hi}, {lo}) must satisfy hi > lo")
    target = np.empty(p)
    target[:n_changed] = rng.uniform(m - hi, m - lo, n_changed)
    target[n_changed:] = np.clip(
        rng.uniform(cfg.unchanged_cosine - 0.02, cfg.unchanged_cosine + 0.02, p - n_changed),
        -1.0, 1.0,
    )
    u = rng.normal(size=(p, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.normal(size=(p, d))
    v -= np.sum(v * u, axis=1, keepdims=True) * u
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    partner = target[:, None] * u + np.sqrt(1.0 - target[:, None] ** 2) * v

    x1 = (cfg.initial_norm * u).T.reshape(1, d, 1, p)
    x2 = (cfg.initial_norm * partner).T.reshape(1, d, 1, p)
    y = np.where(np.arange(p) < n_changed, CHANGED, UNCHANGED).reshape(1, 1, 1, p)
    return x1, x2, y.astype(np.int8)


def _consistency(cos: Node, y: np.ndarray, cfg: InstabilityConfig) -> Node:
    if cfg.variant == LossVariant.SSC:
        return ssc_loss(cos, y, cfg.margin, cfg.tau)
    if cfg.variant == LossVariant.SC:
        return sc_loss(cos, y, cfg.margin)
    # no constraint on changed pairs, they only see weight decay
    return sc_loss(cos, np.where(y == CHANGED, IGNORED, y).astype(np.int8), cfg.margin)


def run_instability_experiment(cfg: InstabilityConfig) -> StabilityTrace:
    """Train the pair population for cfg.steps steps and record the trace.

    The trace stops at the first step with a non-finite loss or gradient.
    """
    rng = np.random.default_rng(cfg.seed)
    x1, x2, y = _population(cfg, rng)
    state = TrainState(params={"x1": x1, "x2": x2})
    records: list[StepRecord] = []
    for step in range(cfg.steps):
        graph = Graph()
        cos = cosine_map(graph.parameter("x1", state.params["x1"]),
                         graph.parameter("x2", state.params["x2"]))
        loss = _consistency(cos, y, cfg)
        report = emulated_backward(graph, loss, cfg.precision)

        loss_value = loss.item()
        nonfinite = bool(report.nonfinite_count) or not np.isfinite(loss_value)
        records.append(
            StepRecord(
                step=step,
                loss=loss_value,
                activation_ratio=gradient_activation_ratio(cos.value, y, cfg.margin),
                grad_norm=report.global_norm(),
                nonfinite=nonfinite,
            )
        )
        if nonfinite:
            logger.info("seed %d: non-finite values at step %d", cfg.seed, step)
            break
        state = sgd_step(state, report, lr_schedule(step, cfg.steps, cfg), cfg)

    unstable, first = detect_instability(
        records,
        cfg.burn_in,
        ratio_jump=cfg.ratio_jump,
        loss_mad_factor=cfg.loss_mad_factor,
        loss_jump_floor=cfg.loss_jump_floor,
        window=cfg.mad_window,
    )
    return StabilityTrace(
        records=records,
        unstable=unstable,
        first_event_step=first,
        variant=cfg.variant,
        precision=cfg.precision.mode,
        seed=cfg.seed,
    )


def gradient_mass_jump(
    cos: np.ndarray,
    y: np.ndarray,
    m: float,
    variant: LossVariant,
    tau: float,
    shift: float,
) -> float:
    """Change of Σ_changed |∂L/∂cos| when every changed cosine moves by `shift`.

    Per-pixel derivatives, not divided by the contributing count.
    """
    probe = Consistency(y, m, variant, tau)
    changed = y == CHANGED

    def mass(c: np.ndarray) -> float:
        return float(np.sum(np.abs(probe.pixel_grad(c))[changed]))

    moved = np.where(changed, np.clip(cos + shift, -1.0, 1.0), cos)
    return abs(mass(moved) - mass(cos))


# =============================================================================
# Ablation grid
# =============================================================================


def _count_unstable(base: InstabilityConfig, seeds: Iterable[int], workers: int) -> int:
    configs = [base.model_copy(update={"seed": s}) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        traces = list(pool.map(run_instability_experiment, configs))
    return sum(t.unstable for t in traces)


def run_instability_ablation(
    base: InstabilityConfig,
    seeds: Sequence[int] = tuple(range(10)),
    *,
    clips: Sequence[float | None] = (1.5, None),
    precisions: Sequence[Precision] = (Precision.FP16_EMULATED, Precision.FP32_REF),
    variants: Sequence[LossVariant] = (LossVariant.NONE, LossVariant.SC, LossVariant.SSC),
    workers: int = 1,
) -> pd.DataFrame:
    """Unstable-seed counts for every (clip, precision, variant) combination."""
    rows = []
    for clip, precision, variant in product(clips, precisions, variants):
        mode = base.precision.model_copy(update={"mode": precision, "grad_clip": clip})
        cfg = base.model_copy(update={"precision": mode, "variant": variant})
        unstable = _count_unstable(cfg, seeds, workers)
        logger.info("clip=%s %s %s: %d/%d unstable", clip, precision.value,
                    variant.value, unstable, len(seeds))
        rows.append(
            {
                "GC": "-" if clip is None else clip,
                "Precision": precision.value.upper(),
                "Loss": variant.value.upper(),
                "unstable_seeds": unstable,
                "seeds": len(seeds),
                "NI": "Yes" if 2 * unstable >= len(seeds) else "No",
            }
        )
    return pd.DataFrame(rows)
