"""Command-line front end: split, train, eval, predict, bench, explain, serve."""

from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import datetime
import json
import pathlib
import platform
import sys

import numpy as np
import PIL

from .checkpoint import fold_checkpoint_path
from .config import RunConfig, resolve_run_config
from .data import ImageCache, SplitAssignment, load_manifest, stratified_split
from .efficiency import (DEFAULT_REPS, DEFAULT_WARMUP, EfficiencyReport, bench_config, emit_comparison,
                         write_layer_table)
from .errors import (CheckpointError, ConfigError, ExplainError, ImageError, LightTBNetError, ManifestError,
                     MetricsError, MissingCheckpointError, NonFiniteLossError, SplitError)
from .evaluation import (aggregate_reports, classify_and_report, cohort_breakdown, format_report,
                         log_report, predict_records, tpp_check, write_report, MetricsReport)
from .explain import explain_image
from .imaging import Preprocessor
from .inference import best_member, ensemble_preprocessor, load_ensemble, predict_image
from .model import ModelConfig, default_channel_plan
from .training import train_all_folds, train_fold
from .utils import logger, write_json

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_CHECKPOINTS = 4
EXIT_DATA = 5
EXIT_CORRUPT_CHECKPOINT = 6
EXIT_NON_FINITE = 7

# most specific first
EXIT_CODES = (
    (MissingCheckpointError, EXIT_MISSING_CHECKPOINTS),
    (CheckpointError, EXIT_CORRUPT_CHECKPOINT),
    (NonFiniteLossError, EXIT_NON_FINITE),
    (ConfigError, EXIT_CONFIG),
    (ManifestError, EXIT_DATA),
    (SplitError, EXIT_DATA),
    (ImageError, EXIT_DATA),
    (MetricsError, EXIT_DATA),
)

RUN_RECORD = "run_record.json"


def exit_code_for(error: BaseException) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return EXIT_FAILURE


def write_run_record(config: RunConfig, command: str, argv: Sequence[str], artifacts: Dict[str, Any],
                     out_dir: Optional[pathlib.Path] = None) -> pathlib.Path:
    """Reproducibility record: effective config, seeds, versions, command and outputs."""
    from lighttbnet import __version__

    out_dir = pathlib.Path(out_dir or config.output_dir)
    record = {
        "command": command,
        "argv": list(argv),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config.to_dict(),
        "seeds": {"split_and_train": config.seed, "model_init": config.model.seed},
        "versions": {"lighttbnet": __version__, "numpy": np.__version__, "Pillow": PIL.__version__,
                     "python": platform.python_version()},
        "artifacts": artifacts,
    }
    return write_json(out_dir / RUN_RECORD, record)


def _image_source(config: RunConfig) -> ImageCache:
    base_dir = pathlib.Path(config.manifest).parent if config.manifest else None
    return ImageCache(Preprocessor(config.preprocess), base_dir)


def _require_manifest(config: RunConfig) -> str:
    if not config.manifest:
        raise ConfigError("no manifest given (use --manifest or set 'manifest' in the config file)")
    return config.manifest


def _load_or_make_split(config: RunConfig, records) -> SplitAssignment:
    if config.split_path.is_file():
        logger.info(f"Using split {config.split_path}")
        return SplitAssignment.from_csv(config.split_path, config.seed)
    split = stratified_split(records, config.test_frac, config.seed)
    split.to_csv(config.split_path)
    print(f"Wrote split {config.split_path}")
    return split


# -- subcommands ------------------------------------------------------------------------

def cmd_split(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    records = load_manifest(_require_manifest(config))
    split = stratified_split(records, config.test_frac, config.seed)
    out = pathlib.Path(args.out) if args.out else config.split_path
    split.to_csv(out)
    fold_sizes = [len(split.fold_paths(k)) for k in range(split.n_folds)]
    print(f"Wrote {out}: {len(split.test_paths())} test, folds {fold_sizes}")
    return {"split": str(out), "test": len(split.test_paths()), "folds": fold_sizes}


def cmd_train(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    records = load_manifest(_require_manifest(config))
    split = _load_or_make_split(config, records)
    source = _image_source(config)
    train_cfg = config.train_config()
    out_dir = config.checkpoints
    if args.fold is not None:
        checkpoints = [train_fold(config.model, records, split, source.get, args.fold, train_cfg, out_dir,
                                  config.preprocess.to_dict())]
    else:
        checkpoints = train_all_folds(config.model, records, split, source.get, out_dir, train_cfg,
                                      config.fold_workers, config.preprocess.to_dict())

    rows = []
    for ckpt in checkpoints:
        rows.append({"fold": ckpt.fold_id, "epoch": ckpt.epoch, "val_auc": ckpt.val_auc,
                     "val_acc": ckpt.extra.get("val_acc"), "val_f1": ckpt.extra.get("val_f1")})
        print(f"fold {ckpt.fold_id}: epoch {ckpt.epoch}, val AUC {ckpt.val_auc}")
    summary = {"folds": rows}
    for key in ("val_acc", "val_f1", "val_auc"):
        values = np.array([r[key] for r in rows if r[key] is not None], dtype=np.float64)
        if values.size:
            summary[key] = {"mean": float(values.mean()), "std": float(values.std())}
    write_json(config.checkpoints / "cv_summary.json", summary)
    return {"checkpoints": [str(fold_checkpoint_path(out_dir, c.fold_id)) for c in checkpoints],
            "cv_summary": str(config.checkpoints / "cv_summary.json")}


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    ensemble = load_ensemble(config.checkpoints)
    records = load_manifest(_require_manifest(config))
    if not config.split_path.is_file():
        raise SplitError(f"split file {config.split_path} not found; run 'split' or 'train' first")
    split = SplitAssignment.from_csv(config.split_path, config.seed)
    test_records = split.select(records, "test")
    source = _image_source(config)
    models = [m for m, _ in ensemble]
    predictions = predict_records(models, test_records, source.get, config.batch_size)

    out_dir = pathlib.Path(config.output_dir)
    pred_path = predictions.to_csv(out_dir / "predictions.csv")
    reports: Dict[str, MetricsReport] = cohort_breakdown(predictions, config.threshold)
    fold_reports = {f"fold{k}": classify_and_report(scores, predictions.labels, config.threshold)
                    for k, scores in enumerate(predictions.fold_scores)}
    report_path = write_report({**reports, **fold_reports}, out_dir / "metrics.csv")
    tpp = tpp_check(reports["combined"])
    write_json(out_dir / "metrics.json", {
        "ensemble": {k: r.to_dict() for k, r in reports.items()},
        "folds": {k: r.to_dict() for k, r in fold_reports.items()},
        "fold_summary": aggregate_reports(list(fold_reports.values())),
        "tpp": tpp.to_dict(),
    })
    for name, report in reports.items():
        log_report(name, report)
    print(format_report({**reports, **fold_reports}))
    print(f"TPP (SN >= 0.90, SP >= 0.70): {'pass' if tpp.passed else 'fail'} "
          f"(SN margin {tpp.sensitivity_margin:+.3f}, SP margin {tpp.specificity_margin:+.3f})")
    return {"predictions": str(pred_path), "metrics": str(report_path), "metrics_json": str(out_dir / "metrics.json")}


def cmd_predict(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    ensemble = load_ensemble(config.checkpoints)
    result = predict_image(ensemble, args.image, config.preprocess)
    print(f"score={result['tb_score']:.4f}")
    out_dir = pathlib.Path(config.output_dir)
    write_json(out_dir / "prediction.json", result)
    return {"prediction": str(out_dir / "prediction.json"), "tb_score": result["tb_score"]}


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    blocks = args.n or [config.model.n_blocks]
    out_dir = pathlib.Path(config.output_dir) / "bench"
    reports: List[EfficiencyReport] = []
    summary_path = config.checkpoints / "cv_summary.json"
    for n in blocks:
        if n == config.model.n_blocks:
            model_cfg = config.model
        else:
            model_cfg = ModelConfig.for_blocks(n, input_size=config.model.input_size,
                                               reduce_channels=config.model.reduce_channels,
                                               fc_hidden=config.model.fc_hidden)
        trained = fold_checkpoint_path(config.checkpoints, 0)
        use_trained = trained.is_file() and n == config.model.n_blocks
        report = bench_config(model_cfg, warmup=args.warmup, reps=args.reps,
                              checkpoint_path=trained if use_trained else None)
        if use_trained and summary_path.is_file():
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
            for key, name in (("val_acc", "acc"), ("val_f1", "f1"), ("val_auc", "auc")):
                if key in summary:
                    report.metrics[name] = summary[key]["mean"]
                    report.metrics_std[name] = summary[key]["std"]
        write_layer_table(report, out_dir / f"layers_N{n}.csv")
        reports.append(report)
    table = emit_comparison(reports, out_dir)
    write_json(out_dir / "efficiency.json", {"reports": [r.to_dict() for r in reports]})
    print(table)
    return {"comparison": str(out_dir / "comparison.csv"), "scatter": str(out_dir / "comparison_scatter.csv"),
            "efficiency": str(out_dir / "efficiency.json")}


def cmd_explain(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    ensemble = load_ensemble(config.checkpoints)
    if args.fold is not None:
        matches = [mc for mc in ensemble if mc[1].fold_id == args.fold]
        if not matches:
            raise ExplainError(f"no checkpoint for fold {args.fold}")
        model, checkpoint = matches[0]
    else:
        model, checkpoint = best_member(ensemble)
    preprocessor = ensemble_preprocessor(ensemble, config.preprocess)
    out_dir = pathlib.Path(config.output_dir) / "explain"
    written = []
    for image_path in args.image:
        image = preprocessor.load(image_path)
        result = explain_image(model, image, out_dir / f"{pathlib.Path(image_path).stem}.png", args.target_layer,
                               args.alpha)
        print(f"{result['path']}: score={result['tb_score']:.4f}")
        written.append(result)
    return {"overlays": [r["path"] for r in written], "fold": checkpoint.fold_id}


def cmd_serve(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    from .server import mcp_server, configure

    configure(config)
    logger.info("Starting MCP server on stdio")
    mcp_server.run(transport="stdio")
    return {}


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], Dict[str, Any]]] = {
    "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "bench": cmd_bench, "explain": cmd_explain, "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="YAML run config (default: $LIGHTTBNET_CONFIG)")
    common.add_argument("--manifest", type=str, help="Manifest CSV: image_path,label,cohort,sex,age")
    common.add_argument("--split", type=str, help="Split CSV (default: <output-dir>/split.csv)")
    common.add_argument("--output-dir", type=str, help="Directory for all outputs")
    common.add_argument("--checkpoint-dir", type=str, help="Fold checkpoints (default: <output-dir>/checkpoints)")
    common.add_argument("--seed", type=int, help="Seed for splitting, initialisation and batching")
    common.add_argument("--n-blocks", type=int, help="Number of residual blocks N (2-6)")
    common.add_argument("--image-size", type=int, help="Model input size (square)")
    common.add_argument("--threshold", type=float, help="Decision threshold on the TB score (default 0.5)")
    common.add_argument("--batch-size", type=int, help="Batch size (default 16)")

    parser = argparse.ArgumentParser(
        prog="lighttbnet",
        description="LightTBNet - lightweight TB detection from chest X-rays",
        epilog="Exit codes: 0 ok, 1 failure, 2 usage, 3 config, 4 missing checkpoints, 5 data, "
               "6 corrupt checkpoint, 7 non-finite loss",
    )
    parser.add_argument("--version", action="store_true", help="Show the version of the package")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("split", parents=[common], help="Stratified train/test split and 5-fold assignment")
    p.add_argument("--test-frac", type=float, help="Fraction reserved for testing (default 0.2)")
    p.add_argument("--out", type=str, help="Split CSV to write")

    p = sub.add_parser("train", parents=[common], help="Train all five folds (or one with --fold)")
    p.add_argument("--epochs", type=int, help="Epochs per fold (default 100)")
    p.add_argument("--fold", type=int, help="Train only this fold")
    p.add_argument("--workers", type=int, help="Threads assembling batches (0 = inline)")
    p.add_argument("--fold-workers", type=int, help="Folds trained in parallel (0 = sequential)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    p.add_argument("--gamma", type=float, help="Focal loss gamma (default 2.0)")

    sub.add_parser("eval", parents=[common], help="Ensemble evaluation on the test split")

    p = sub.add_parser("predict", parents=[common], help="TB score of one image with the 5-model ensemble")
    p.add_argument("--image", type=str, required=True, help="PNG or PGM image")

    p = sub.add_parser("bench", parents=[common], help="MACs, parameters, latency and size per N")
    p.add_argument("--n", type=int, action="append", help="Block count to compare (repeatable)")
    p.add_argument("--reps", type=int, default=DEFAULT_REPS, help="Timed repetitions (default 300)")
    p.add_argument("--warmup", type=int, default=DEFAULT_WARMUP, help="Untimed warm-up passes (default 20)")

    p = sub.add_parser("explain", parents=[common], help="Saliency and grad-CAM overlays")
    p.add_argument("--image", type=str, action="append", required=True, help="Image to explain (repeatable)")
    p.add_argument("--fold", type=int, help="Fold model to explain (default: best validation AUC)")
    p.add_argument("--target-layer", type=str, help="Grad-CAM layer (default: last residual block)")
    p.add_argument("--alpha", type=float, default=0.5, help="Heatmap opacity (default 0.5)")

    sub.add_parser("serve", parents=[common], help="Run the MCP tool server on stdio")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys for every flag the user set."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {
        "manifest": get("manifest"), "split": get("split"), "output_dir": get("output_dir"),
        "checkpoint_dir": get("checkpoint_dir"), "seed": get("seed"), "threshold": get("threshold"),
        "test_frac": get("test_frac"),
        "train.epochs": get("epochs"), "train.batch_size": get("batch_size"), "train.workers": get("workers"),
        "train.fold_workers": get("fold_workers"), "adam.lr": get("lr"), "focal.gamma": get("gamma"),
    }
    if get("n_blocks") is not None:
        overrides["model.n_blocks"] = get("n_blocks")
        overrides["model.channel_plan"] = default_channel_plan(get("n_blocks"))
    if get("image_size") is not None:
        overrides["model.input_size"] = get("image_size")
        overrides["preprocess.image_size"] = get("image_size")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    logger.info("LightTBNet CLI starting")
    logger.debug(f"Python version: {sys.version}")
    logger.debug(f"Args: {argv}")

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.version:
        from lighttbnet import __version__
        print(f"LightTBNet v{__version__}")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        config = resolve_run_config(args.config, overrides_from_args(args))
        artifacts = COMMANDS[args.command](config, args)
        if args.command != "serve":
            write_run_record(config, args.command, argv, artifacts)
        return EXIT_OK
    except LightTBNetError as e:
        print(f"Error: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}'")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE
