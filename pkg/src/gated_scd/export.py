"""Export of run artefacts: CSV tables, Excel workbooks and heatmap rasters.

Every table goes through a pandas DataFrame; workbooks get the data sheet,
a Summary sheet and auto-sized columns.
"""

from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from openpyxl.utils import get_column_letter

from gated_scd.data import to_bytes_half_away, write_pgm
from gated_scd.models import MetricReport, StabilityTrace

CURVE_COLUMNS = [
    "epoch", "step", "lr", "total", "ce_A", "ce_B", "change", "sc",
    "activation_ratio", "val_fscd", "val_miou", "val_oa", "val_sek",
]
TRACE_COLUMNS = ["step", "loss", "activation_ratio", "grad_norm", "nonfinite"]


def _ensure_dir(directory: Path) -> Path:
    """Ensure export directory exists."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


# =============================================================================
# DataFrame Conversion
# =============================================================================


def curves_to_dataframe(rows: Sequence[dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=CURVE_COLUMNS)


def metrics_to_dataframe(reports: Sequence[MetricReport]) -> pd.DataFrame:
    return pd.DataFrame([r.csv_row() for r in reports])


def trace_to_dataframe(trace: StabilityTrace) -> pd.DataFrame:
    df = pd.DataFrame([r.model_dump() for r in trace.records], columns=TRACE_COLUMNS)
    df["nonfinite"] = df["nonfinite"].astype(int)
    return df


# =============================================================================
# CSV Export
# =============================================================================


def export_curves(rows: Sequence[dict], path: Path) -> Path:
    _ensure_dir(Path(path).parent)
    curves_to_dataframe(rows).to_csv(path, index=False)
    return Path(path)


def export_metrics(report: MetricReport, path: Path) -> Path:
    """Single-row `oa,f_scd,miou,sek,p_scd,r_scd` CSV, ×100 with 2 decimals."""
    _ensure_dir(Path(path).parent)
    metrics_to_dataframe([report]).to_csv(path, index=False, float_format="%.2f")
    return Path(path)


def trace_filename(trace: StabilityTrace) -> str:
    return f"trace_{trace.variant.value}_{trace.precision.value}_seed{trace.seed}.csv"


def export_trace(trace: StabilityTrace, directory: Path) -> Path:
    filepath = _ensure_dir(directory) / trace_filename(trace)
    trace_to_dataframe(trace).to_csv(filepath, index=False)
    return filepath


# =============================================================================
# Excel Export
# =============================================================================


def export_table(
    df: pd.DataFrame,
    directory: Path,
    stem: str,
    sheet_name: str,
    summary: dict[str, object],
) -> tuple[Path, Path]:
    """Write `{stem}.csv` and a formatted `{stem}.xlsx` with a Summary sheet."""
    directory = _ensure_dir(directory)
    csv_path = directory / f"{stem}.csv"
    xlsx_path = directory / f"{stem}.xlsx"
    df.to_csv(csv_path, index=False)

    with pd.ExcelWriter(xlsx_path, engine="openpyxl") as writer:
        df.to_excel(writer, sheet_name=sheet_name, index=False)
        worksheet = writer.sheets[sheet_name]
        for i, column in enumerate(df.columns):
            max_length = max(df[column].astype(str).map(len).max(), len(str(column)))
            worksheet.column_dimensions[get_column_letter(i + 1)].width = min(max_length + 2, 50)

        summary = {**summary, "Export Date": datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")}
        summary_df = pd.DataFrame({"Metric": list(summary), "Value": [str(v) for v in summary.values()]})
        summary_df.to_excel(writer, sheet_name="Summary", index=False)

    return csv_path, xlsx_path


def export_instability_ablation(df: pd.DataFrame, directory: Path) -> tuple[Path, Path]:
    summary = {
        "Settings": len(df),
        "Unstable settings": int((df["NI"] == "Yes").sum()),
        "Seeds per setting": int(df["seeds"].max()) if len(df) else 0,
    }
    return export_table(df, directory, "instability_ablation", "Instability", summary)


def export_tau_sweep(df: pd.DataFrame, directory: Path) -> tuple[Path, Path]:
    best = df.loc[df["f_scd"].idxmax()] if len(df) else None
    summary = {
        "Temperatures": len(df),
        "Best tau": "" if best is None else best["tau"],
        "Best F_scd": "" if best is None else best["f_scd"],
    }
    return export_table(df, directory, "tau_sweep", "Temperature", summary)


# =============================================================================
# Heatmaps
# =============================================================================


def heatmap_to_bytes(weight_map: np.ndarray) -> np.ndarray:
    """Gating weights in (0, 2) mapped linearly onto 0..255, halves rounded up."""
    return to_bytes_half_away(np.asarray(weight_map, dtype=np.float64) / 2.0)


def export_heatmaps(
    heatmaps: Sequence[tuple[np.ndarray, np.ndarray]],
    directory: Path,
    sample_id: str,
) -> list[Path]:
    """One W_z and one W_h PGM per block, from (h, w) weight maps."""
    directory = _ensure_dir(directory)
    paths = []
    for block, (w_z, w_h) in enumerate(heatmaps, start=1):
        for tag, weight_map in (("Wz", w_z), ("Wh", w_h)):
            path = directory / f"{sample_id}_block{block}_{tag}.pgm"
            write_pgm(heatmap_to_bytes(weight_map), path)
            paths.append(path)
    return paths


def export_prediction(
    label_A: np.ndarray, label_B: np.ndarray, change: np.ndarray, directory: Path, sample_id: str
) -> list[Path]:
    directory = _ensure_dir(directory)
    paths = [directory / f"{sample_id}_{s}.pgm" for s in ("semA", "semB", "change")]
    for path, label_map in zip(paths, (label_A, label_B, change), strict=True):
        write_pgm(label_map, path)
    return paths
