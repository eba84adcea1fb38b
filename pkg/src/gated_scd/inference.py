"""Run a saved model over a dataset directory."""

import logging
from pathlib import Path

from gated_scd.data import list_sample_ids, load_pair
from gated_scd.decoder import forward_model, predict_scd_map
from gated_scd.errors import DataError
from gated_scd.export import export_heatmaps, export_prediction
from gated_scd.storage import load_model

logger = logging.getLogger(__name__)


def _sample_ids(data_dir: Path, limit: int | None) -> list[str]:
    ids = list_sample_ids(data_dir)
    if not ids:
        raise DataError(f"{data_dir}: no samples")
    return ids[:limit] if limit else ids


def predict_directory(
    model_dir: Path, data_dir: Path, out_dir: Path, threshold: float = 0.5,
    limit: int | None = None,
) -> list[Path]:
    """Write `{id}_semA.pgm`, `{id}_semB.pgm`, `{id}_change.pgm` per sample."""
    params, config = load_model(model_dir)
    written = []
    for sid in _sample_ids(data_dir, limit):
        pair = load_pair(data_dir, sid)
        _, pred = forward_model(params, pair.image_A, pair.image_B, config)
        label_a, label_b, change = predict_scd_map(pred, threshold)
        written += export_prediction(label_a[0], label_b[0], change[0], out_dir, sid)
    logger.info("wrote %d prediction maps to %s", len(written), out_dir)
    return written


def heatmaps_directory(
    model_dir: Path, data_dir: Path, out_dir: Path, limit: int | None = None
) -> list[Path]:
    """Write the W_z / W_h gating maps of every block for every sample."""
    params, config = load_model(model_dir)
    if not config.use_cagm:
        raise DataError(f"{model_dir}: model was trained without gating, no heatmaps exist")
    written = []
    for sid in _sample_ids(data_dir, limit):
        pair = load_pair(data_dir, sid)
        _, pred = forward_model(params, pair.image_A, pair.image_B, config)
        maps = [(w_z.value[0, 0], w_h.value[0, 0]) for w_z, w_h in pred.heatmaps]
        written += export_heatmaps(maps, out_dir, sid)
    return written
