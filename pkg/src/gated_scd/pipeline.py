"""Command-line entry point for the change detection lab.

Subcommands:
    gen-data               write a synthetic bi-temporal dataset
    train                  train encoder + gated decoder, checkpoint the best epoch
    eval                   score prediction maps against ground truth
    predict                run a checkpoint over a dataset directory
    gradcheck              finite-difference check of every op and module
    simulate-instability   near-margin population under fp16/fp32, sc/ssc
    export-heatmaps        write the gating weight maps of a checkpoint
    ablate-tau             temperature sweep of the smoothed consistency loss

Usage:
    python -m gated_scd.pipeline gen-data --seed 7 --count 10 --size 64 --classes 4
    python -m gated_scd.pipeline train --config config/train.cfg --epochs 5
    python -m gated_scd.pipeline simulate-instability --grid

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numerical abort.
"""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from gated_scd.config import DATA_DIR, OUTPUT_DIR, build_config, read_config
from gated_scd.data import synthetic_dataset, write_pair
from gated_scd.errors import (
    ContractError,
    DataError,
    EmptyReductionError,
    FormatError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from gated_scd.export import (
    export_instability_ablation,
    export_metrics,
    export_tau_sweep,
    export_trace,
)
from gated_scd.gradcheck import CASES, run_case
from gated_scd.inference import heatmaps_directory, predict_directory
from gated_scd.models import InstabilityConfig, TrainConfig
from gated_scd.precision import run_instability_ablation, run_instability_experiment
from gated_scd.training import evaluate, sweep_temperature, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger(__name__)


def _banner(title: str, detail: str = "") -> None:
    print("=" * 60)
    print(title)
    if detail:
        print(detail)
    print("=" * 60)


def _layers(args: argparse.Namespace, keys: list[str], env: dict) -> list[dict]:
    """env defaults < --config file < explicit flags."""
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return [env, file_values, flags]


# =============================================================================
# Commands
# =============================================================================


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out or DATA_DIR)
    _banner("Synthetic Data", f"Seed: {args.seed} | Pairs: {args.count} | Size: {args.size}")
    pairs = synthetic_dataset(args.seed, args.count, args.size, args.classes, args.change_rate)
    for pair in pairs:
        write_pair(pair, out)
    changed = sum(float(p.change_mask.mean()) for p in pairs) / len(pairs)
    print(f"Wrote {len(pairs)} pairs to {out}")
    print(f"Mean changed fraction: {changed:.3f}")
    return EXIT_OK


_TRAIN_KEYS = [
    "epochs", "seed", "lr_peak", "lr_floor", "batch_size", "weight_decay", "momentum",
    "warmup_fraction", "poly_power", "variant", "tau", "margin", "sc_weight", "precision",
    "loss_scale", "grad_clip", "train_dir", "val_dir", "output_dir", "train_count",
    "val_count", "data_seed", "use_cagm", "num_classes", "decoder_width",
]


def _train_config(args: argparse.Namespace) -> TrainConfig:
    if getattr(args, "no_cagm", False):
        args.use_cagm = False
    return build_config(TrainConfig, *_layers(args, _TRAIN_KEYS, {"output_dir": OUTPUT_DIR}))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    _banner("Training", f"Variant: {cfg.loss.variant.value} | Precision: "
            f"{cfg.precision.mode.value} | Epochs: {cfg.epochs} | Seed: {cfg.seed}")

    def report(row: dict) -> None:
        print(f"  epoch {row['epoch']:3d} | loss {row['total']:.4f} | lr {row['lr']:.4g} | "
              f"F_scd {100 * row['val_fscd']:.2f} | mIoU {100 * row['val_miou']:.2f}")

    result = train(cfg, on_epoch=report)
    print("-" * 40)
    best = result.best_report
    print(f"Best F_scd: {100 * best.f_scd:.2f} | mIoU: {100 * best.miou:.2f} | "
          f"Sek: {100 * best.sek:.2f} | OA: {100 * best.oa:.2f}")
    print(f"Curves: {result.curves_path}")
    print(f"Checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _banner("Evaluation", f"Predictions: {args.pred_dir} | Ground truth: {args.gt_dir}")
    report = evaluate(Path(args.pred_dir), Path(args.gt_dir), num_classes=args.classes,
                      shards=args.shards)
    for key, value in report.csv_row().items():
        print(f"  {key:6s} {value:6.2f}")
    print(f"  score  {100 * report.score:6.2f}")
    if args.out:
        print(f"Metrics: {export_metrics(report, Path(args.out))}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    _banner("Prediction", f"Checkpoint: {args.checkpoint}")
    paths = predict_directory(Path(args.checkpoint), Path(args.data_dir), Path(args.out),
                              args.threshold, args.limit)
    print(f"Wrote {len(paths)} maps to {args.out}")
    return EXIT_OK


def cmd_export_heatmaps(args: argparse.Namespace) -> int:
    _banner("Gating Heatmaps", f"Checkpoint: {args.checkpoint}")
    paths = heatmaps_directory(Path(args.checkpoint), Path(args.data_dir), Path(args.out),
                               args.limit)
    print(f"Wrote {len(paths)} heatmaps to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = args.cases or list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ParameterError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    _banner("Gradient Check", f"Cases: {len(names)} | Seed: {args.seed}")
    failed = 0
    for name in names:
        result = run_case(name, args.seed)
        status = "ok" if result.passed else "FAIL"
        failed += not result.passed
        print(f"  {name:20s} {result.max_rel_error:.2e}  {result.seconds:5.1f}s  {status}")
    print("-" * 40)
    print(f"{len(names) - failed}/{len(names)} passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


_INSTABILITY_KEYS = [
    "variant", "precision", "loss_scale", "grad_clip", "steps", "population",
    "feature_dim", "tau", "margin", "lr_peak", "weight_decay",
]


def cmd_simulate_instability(args: argparse.Namespace) -> int:
    base = build_config(InstabilityConfig, *_layers(args, _INSTABILITY_KEYS, {}))
    seeds = list(range(args.seeds))
    out = Path(args.out or OUTPUT_DIR)
    if args.grid:
        _banner("Instability Ablation", f"Seeds per setting: {len(seeds)}")
        df = run_instability_ablation(base, seeds, workers=args.workers)
        print(df.to_string(index=False))
        csv_path, xlsx_path = export_instability_ablation(df, out)
        print(f"\nCSV: {csv_path}")
        print(f"Excel: {xlsx_path}")
        return EXIT_OK

    _banner("Instability Experiment", f"Variant: {base.variant.value} | Precision: "
            f"{base.precision.mode.value} | Clip: {base.precision.grad_clip}")
    unstable = 0
    for seed in seeds:
        trace = run_instability_experiment(base.model_copy(update={"seed": seed}))
        unstable += trace.unstable
        path = export_trace(trace, out)
        event = trace.first_event_step if trace.unstable else "-"
        print(f"  seed {seed:2d} | unstable {str(trace.unstable):5s} | event {event} | {path.name}")
    print("-" * 40)
    print(f"Unstable seeds: {unstable}/{len(seeds)}")
    return EXIT_OK


def cmd_ablate_tau(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    taus = [float(t) for t in args.taus.split(",")]
    _banner("Temperature Sweep", f"Taus: {', '.join(f'{t:g}' for t in taus)}")
    df = sweep_temperature(cfg, taus)
    print(df.to_string(index=False))
    csv_path, xlsx_path = export_tau_sweep(df, Path(cfg.output_dir))
    print(f"\nCSV: {csv_path}")
    print(f"Excel: {xlsx_path}")
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Flat key = value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--lr-peak", dest="lr_peak", type=float)
    p.add_argument("--lr-floor", dest="lr_floor", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    p.add_argument("--poly-power", dest="poly_power", type=float)
    p.add_argument("--variant", choices=["none", "sc", "ssc"])
    p.add_argument("--tau", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--sc-weight", dest="sc_weight", type=float)
    p.add_argument("--precision", choices=["fp32", "fp16"])
    p.add_argument("--loss-scale", dest="loss_scale", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--train-dir", dest="train_dir")
    p.add_argument("--val-dir", dest="val_dir")
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--decoder-width", dest="decoder_width", type=int)
    p.add_argument("--no-cagm", dest="no_cagm", action="store_true",
                   help="Fuse by elementwise addition instead of gating")
    p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="gated-scd", description="Gated semantic change detection lab")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--change-rate", dest="change_rate", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="Train and checkpoint the best epoch")
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Score prediction maps against ground truth")
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--gt-dir", dest="gt_dir", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--out", help="Metrics CSV path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="Write prediction maps for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--limit", type=int)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient suite")
    p.add_argument("--cases", nargs="*", help=f"Subset of: {', '.join(CASES)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("simulate-instability", help="Near-margin instability experiment")
    p.add_argument("--config")
    p.add_argument("--variant", choices=["none", "sc", "ssc"])
    p.add_argument("--precision", choices=["fp32", "fp16"])
    p.add_argument("--loss-scale", dest="loss_scale", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--lr-peak", dest="lr_peak", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seeds", type=int, default=10, help="Run seeds 0..N-1")
    p.add_argument("--grid", action="store_true", help="Full clip x precision x loss table")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_simulate_instability)

    p = sub.add_parser("export-heatmaps", help="Write gating weight maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(handler=cmd_export_heatmaps)

    p = sub.add_parser("ablate-tau", help="Temperature sweep")
    _add_train_flags(p)
    p.add_argument("--taus", default="0.01,0.05,0.1,0.5,1")
    p.set_defaults(handler=cmd_ablate_tau)
    return parser


def main(argv: list[str] | None = None) -> int:
    """CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (ValidationError, ParameterError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, EmptyReductionError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
