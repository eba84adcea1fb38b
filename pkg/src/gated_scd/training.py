"""Training loop, evaluation and the temperature sweep.

One optimizer step: forward the batch, build the composite loss, backward
under the configured precision mode, clip, SGD update with the scheduled
learning rate. Validation runs after every epoch; the best epoch by F_scd is
checkpointed.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from gated_scd.data import (
    SamplePair,
    list_sample_ids,
    load_dataset,
    read_pgm,
    stack_batch,
    synthetic_dataset,
)
from gated_scd.decoder import forward_model, init_params, predict_scd_map
from gated_scd.errors import DataError, EmptyReductionError, TrainingError
from gated_scd.export import export_curves
from gated_scd.losses import total_loss
from gated_scd.metrics import ScdEvaluator
from gated_scd.models import IGNORE_INDEX, LossVariant, MetricReport, TrainConfig
from gated_scd.optim import TrainState, lr_schedule, sgd_step
from gated_scd.precision import emulated_backward
from gated_scd.storage import save_model

logger = logging.getLogger(__name__)

CURVES_NAME = "curves.csv"
VAL_DATA_OFFSET = 1  # validation pairs come from data seed + 1


@dataclass
class TrainResult:
    state: TrainState
    curves: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    best_report: MetricReport | None = None
    final_report: MetricReport | None = None
    curves_path: Path | None = None
    checkpoint_path: Path | None = None


def load_splits(cfg: TrainConfig) -> tuple[list[SamplePair], list[SamplePair]]:
    """Training and validation pairs from directories or the synthetic generator."""
    classes = cfg.decoder.num_classes - 1
    if cfg.train_dir is not None:
        train = load_dataset(cfg.train_dir)
    else:
        train = synthetic_dataset(cfg.data_seed, cfg.train_count, cfg.image_size, classes,
                                  cfg.change_rate)
    if cfg.val_dir is not None:
        val = load_dataset(cfg.val_dir)
    else:
        val = synthetic_dataset(cfg.data_seed + VAL_DATA_OFFSET, cfg.val_count,
                                cfg.image_size, classes, cfg.change_rate)
    return train, val


def _batches(pairs: Sequence[SamplePair], size: int):
    for start in range(0, len(pairs), size):
        yield pairs[start : start + size]


def evaluate_pairs(
    params: dict[str, np.ndarray], pairs: Sequence[SamplePair], cfg: TrainConfig
) -> MetricReport:
    evaluator = ScdEvaluator(cfg.decoder.num_classes - 1)
    for batch in _batches(pairs, cfg.batch_size):
        images_a, images_b, labels = stack_batch(batch)
        _, pred = forward_model(params, images_a, images_b, cfg.decoder)
        pred_a, pred_b, _ = predict_scd_map(pred, cfg.threshold)
        for i in range(len(batch)):
            evaluator.add(labels.sem_A[i], labels.sem_B[i], pred_a[i], pred_b[i])
    return evaluator.report()


def train(
    cfg: TrainConfig,
    *,
    write_artifacts: bool = True,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    train_pairs, val_pairs = load_splits(cfg)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(params=init_params(cfg.decoder, rng))
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    result = TrainResult(state=state)
    logger.info("training %d epochs x %d steps on %d pairs", cfg.epochs, steps_per_epoch,
                len(train_pairs))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        sums = dict.fromkeys(("total", "ce_A", "ce_B", "change_term", "sc_term",
                              "activation_ratio"), 0.0)
        lr = 0.0
        for b in range(steps_per_epoch):
            batch = [train_pairs[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            images_a, images_b, labels = stack_batch(batch)
            graph, pred = forward_model(state.params, images_a, images_b, cfg.decoder)
            loss, breakdown = total_loss(pred, labels, cfg.loss)
            if not math.isfinite(breakdown.total) and not cfg.precision.is_fp16:
                raise TrainingError(f"epoch {epoch} step {state.step}: loss is {breakdown.total}")
            report = emulated_backward(graph, loss, cfg.precision)
            lr = lr_schedule(state.step, total_steps, cfg)
            state = sgd_step(state, report, lr, cfg)
            for key in sums:
                sums[key] += getattr(breakdown, key)

        val = evaluate_pairs(state.params, val_pairs, cfg)
        row = {
            "epoch": epoch,
            "step": state.step - 1,
            "lr": lr,
            "total": sums["total"] / steps_per_epoch,
            "ce_A": sums["ce_A"] / steps_per_epoch,
            "ce_B": sums["ce_B"] / steps_per_epoch,
            "change": sums["change_term"] / steps_per_epoch,
            "sc": sums["sc_term"] / steps_per_epoch,
            "activation_ratio": sums["activation_ratio"] / steps_per_epoch,
            "val_fscd": val.f_scd,
            "val_miou": val.miou,
            "val_oa": val.oa,
            "val_sek": val.sek,
        }
        result.curves.append(row)
        result.final_report = val
        if val.f_scd > state.best_fscd:
            state.best_fscd = val.f_scd
            result.best_params = {k: v.copy() for k, v in state.params.items()}
            result.best_report = val
            if write_artifacts:
                result.checkpoint_path = save_model(result.best_params, cfg.decoder,
                                                    cfg.output_dir)
        if on_epoch:
            on_epoch(row)

    result.state = state
    if write_artifacts:
        result.curves_path = export_curves(result.curves, Path(cfg.output_dir) / CURVES_NAME)
    return result


def sweep_temperature(cfg: TrainConfig, taus: Sequence[float]) -> pd.DataFrame:
    """Train one ssc model per temperature and collect its best validation metrics."""
    rows = []
    for tau in taus:
        loss = cfg.loss.model_copy(update={"variant": LossVariant.SSC, "tau": tau})
        run_cfg = cfg.model_copy(update={"loss": loss,
                                         "output_dir": Path(cfg.output_dir) / f"tau_{tau:g}"})
        result = train(run_cfg, write_artifacts=False)
        best = result.best_report or result.final_report
        logger.info("tau=%g best F_scd %.4f", tau, best.f_scd)
        rows.append({"tau": tau, **best.csv_row(), "score": round(100.0 * best.score, 2)})
    return pd.DataFrame(rows)


# =============================================================================
# Directory evaluation
# =============================================================================


def _evaluate_shard(pred_dir: Path, gt_dir: Path, ids: Sequence[str],
                    num_classes: int) -> ScdEvaluator:
    evaluator = ScdEvaluator(num_classes)
    for sid in ids:
        maps = []
        for directory in (gt_dir, pred_dir):
            for tag in ("semA", "semB"):
                path = Path(directory) / f"{sid}_{tag}.pgm"
                if not path.exists():
                    raise DataError(f"sample {sid}: missing {path}")
                maps.append(read_pgm(path))
        evaluator.add(*maps)
    return evaluator


def _infer_num_classes(directories: Sequence[Path], ids: Sequence[str]) -> int:
    top = 1
    for directory in directories:
        for sid in ids:
            for tag in ("semA", "semB"):
                path = Path(directory) / f"{sid}_{tag}.pgm"
                if path.exists():
                    values = read_pgm(path)
                    values = values[values != IGNORE_INDEX]
                    if values.size:
                        top = max(top, int(values.max()))
    return top


def evaluate(
    pred_dir: Path, gt_dir: Path, *, num_classes: int | None = None, shards: int = 1
) -> MetricReport:
    """Metrics over every `{id}_semA.pgm` / `{id}_semB.pgm` pair in gt_dir."""
    ids = list_sample_ids(gt_dir)
    if not ids:
        raise EmptyReductionError(f"{gt_dir}: no ground-truth maps")
    if num_classes is None:
        num_classes = _infer_num_classes([gt_dir, pred_dir], ids)
    shards = max(1, min(shards, len(ids)))
    chunks = [ids[i::shards] for i in range(shards)]
    with ThreadPoolExecutor(max_workers=shards) as pool:
        parts = list(pool.map(lambda c: _evaluate_shard(pred_dir, gt_dir, c, num_classes), chunks))
    merged = parts[0]
    for part in parts[1:]:
        merged = merged.merge(part)
    return merged.report()
