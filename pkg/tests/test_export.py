import numpy as np
import pandas as pd
from openpyxl import load_workbook

from gated_scd.data import read_pgm, write_ppm
from gated_scd.export import (
    export_curves,
    export_heatmaps,
    export_instability_ablation,
    export_trace,
    heatmap_to_bytes,
)
from gated_scd.models import LossVariant, Precision, StabilityTrace, StepRecord


def test_heatmap_mapping():
    values = heatmap_to_bytes(np.array([[0.0, 0.75, 1.0, 2.0]]))
    np.testing.assert_array_equal(values, [[0, 96, 128, 255]])


def test_heatmap_rounding_matches_ppm(tmp_path, rng):
    channel = rng.uniform(size=(4, 5))
    channel[0, :3] = [0.5, 2.5 / 255, 126.5 / 255]
    write_ppm(np.stack([channel] * 3), tmp_path / "ref.ppm")
    payload = np.frombuffer((tmp_path / "ref.ppm").read_bytes()[-60:], dtype=np.uint8)
    np.testing.assert_array_equal(heatmap_to_bytes(2.0 * channel), payload[::3].reshape(4, 5))


def test_heatmap_files(tmp_path):
    maps = [(np.full((2, 2), 0.75), np.full((2, 2), 1.5))]
    paths = export_heatmaps(maps, tmp_path, "pair_0003")
    assert [p.name for p in paths] == ["pair_0003_block1_Wz.pgm", "pair_0003_block1_Wh.pgm"]
    np.testing.assert_array_equal(read_pgm(paths[1]), 191)


def test_trace_csv(tmp_path):
    trace = StabilityTrace(
        records=[StepRecord(step=0, loss=0.3, activation_ratio=0.0, grad_norm=1.0)],
        unstable=False,
        first_event_step=None,
        variant=LossVariant.SSC,
        precision=Precision.FP16_EMULATED,
        seed=4,
    )
    path = export_trace(trace, tmp_path)
    assert path.name == "trace_ssc_fp16_seed4.csv"
    assert pd.read_csv(path)["nonfinite"].tolist() == [0]


def test_curves_keep_column_order(tmp_path):
    path = export_curves([{"epoch": 1, "total": 0.5, "lr": 0.1}], tmp_path / "curves.csv")
    columns = pd.read_csv(path).columns.tolist()
    assert columns[:4] == ["epoch", "step", "lr", "total"]


def test_ablation_workbook(tmp_path):
    df = pd.DataFrame([
        {"GC": "-", "Precision": "FP16", "Loss": "SC", "unstable_seeds": 8, "seeds": 10,
         "NI": "Yes"},
        {"GC": 1.5, "Precision": "FP16", "Loss": "SSC", "unstable_seeds": 0, "seeds": 10,
         "NI": "No"},
    ])
    csv_path, xlsx_path = export_instability_ablation(df, tmp_path)
    assert csv_path.name == "instability_ablation.csv"
    workbook = load_workbook(xlsx_path)
    assert workbook.sheetnames == ["Instability", "Summary"]
    summary = {row[0]: row[1] for row in workbook["Summary"].iter_rows(min_row=2, values_only=True)}
    assert summary["Unstable settings"] == "1"
