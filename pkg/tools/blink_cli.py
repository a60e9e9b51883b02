#!/usr/bin/env python3
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from src.architectures import HyperParams, RnnCellKind, resolve_model_kind, validate_hyperparams
from src.checkpoint import load_checkpoint
from src.core.config import get_settings
from src.core.errors import BlinkSegmentationError, ConfigError, IngestionError
from src.metrics import evaluate
from src.recordings import ChannelConfig, load_dataset, make_split, subjects_of
from src.search import (
    ResultStore,
    build_leaderboard,
    default_grid,
    enumerate_grid,
    load_grid,
    report,
    run_search,
    summarize,
    train_and_score,
    write_history,
)
from src.segmenter import WindowPlan, build_plan, segment, write_predictions
from src.synthgen import build_config, generate_dataset
from src.trainer import TrainConfig

logging.basicConfig(
    stream=sys.stdout,
    level=logging.INFO,
    format=(
        "[%(asctime)s] %(levelname)s "
        "[%(module)s.%(funcName)s:%(lineno)d] %(message)s"
    ),
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, default=str))


def _plan(args) -> WindowPlan:
    settings = get_settings()
    offsets = settings.OFFSETS
    if args.offsets:
        try:
            offsets = [int(v) for v in args.offsets.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"--offsets must be comma-separated integers: {e}") from e
    weights = settings.OFFSET_WEIGHTS if offsets == settings.OFFSETS else None
    return build_plan(
        window_len=args.window_len or settings.WINDOW_LEN,
        stride=args.stride or settings.STRIDE,
        offsets=offsets,
        offset_weights=weights,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig.from_settings(
        get_settings(),
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
    )


def _hyperparams(args) -> HyperParams:
    try:
        hp = HyperParams(
            model_kind=resolve_model_kind(args.model),
            num_channels=args.channels or get_settings().DEFAULT_CHANNELS,
            filter_size=args.filter_size,
            num_blocks=args.num_blocks,
            num_filters=args.num_filters,
            num_rnn_blocks=args.num_rnn_blocks,
            num_units=args.num_units,
            rnn_cell=RnnCellKind(args.rnn_cell) if args.rnn_cell else None,
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid hyperparameters: {e}") from e
    validate_hyperparams(hp)
    return hp


def _require_data(args) -> str:
    if not args.data:
        raise ConfigError("--data <manifest> is required for this command")
    return args.data


def cmd_synth(args) -> dict:
    settings = get_settings()
    cfg = build_config(
        duration_s=args.duration_s,
        sample_rate_hz=settings.SAMPLE_RATE_HZ,
        blink_rate_per_min=args.blink_rate,
        noise_sd_uv=args.noise_sd,
        seed=args.seed,
    )
    out_dir = args.out_dir or "data"
    manifest = generate_dataset(args.n_hc, args.n_pd, out_dir, cfg, seed=args.seed)
    return {"status": "success", "manifest": manifest, "subjects": args.n_hc + args.n_pd}


def cmd_train(args) -> dict:
    hp = _hyperparams(args)
    plan = _plan(args)
    recordings = load_dataset(_require_data(args))
    out_dir = args.out_dir or get_settings().RESULTS_DIR
    os.makedirs(out_dir, exist_ok=True)
    split = make_split(subjects_of(recordings), args.seed)
    store = ResultStore(out_dir)
    result = train_and_score(hp, recordings, split, _train_config(args), plan, store, get_settings().IOU_THRESHOLD)
    if result.status != "ok":
        raise BlinkSegmentationError(result.error or "training failed")
    history_path = os.path.join(out_dir, f"{hp.key()}-history.csv")
    write_history(history_path, result.history)
    return {
        "status": "success",
        "checkpoint": store.checkpoint_path(hp, result.seed),
        "history": history_path,
        "search_f1_micro": result.search_f1_micro,
        "best_epoch": result.best_epoch,
        "split_note": split.note,
    }


def cmd_search(args) -> dict:
    settings = get_settings()
    grid_spec = load_grid(args.grid) if args.grid else default_grid()
    if args.models:
        wanted = {resolve_model_kind(name.strip()) for name in args.models.split(",")}
        grid_spec = grid_spec.model_copy(
            update={"models": {k: v for k, v in grid_spec.models.items() if k in wanted}}
        )
    grid = enumerate_grid(grid_spec)
    if args.channels:
        grid = [hp for hp in grid if hp.num_channels == args.channels]
    recordings = load_dataset(_require_data(args))
    split = make_split(subjects_of(recordings), args.seed)
    out_dir = args.out_dir or settings.RESULTS_DIR
    store = ResultStore(os.path.join(out_dir, "store"))
    leaderboard = run_search(
        grid,
        recordings,
        split,
        _train_config(args),
        _plan(args),
        store,
        workers=args.workers,
        top_k=args.top_k or settings.TOP_K,
        iou_threshold=settings.IOU_THRESHOLD,
    )
    results = store.load_all()
    paths = report(leaderboard, os.path.join(out_dir, "report"), results) if leaderboard else {}
    return {"status": "success", "configs": len(grid), **summarize(results), "reports": paths}


def cmd_segment(args) -> dict:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for segment")
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.to_model()
    config = ChannelConfig.for_count(checkpoint.hyperparams.num_channels)
    if args.channels and args.channels != config.count:
        raise ConfigError(f"Checkpoint takes {config.count} channels, --channels asked for {args.channels}")
    plan = _plan(args)
    out_dir = args.out_dir or "predictions"
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for recording in load_dataset(_require_data(args)):
        labels = segment(model, recording, config, plan)
        path = os.path.join(out_dir, f"{recording.subject_id}_pred.csv")
        write_predictions(path, labels)
        written.append(path)
    return {"status": "success", "predictions": written}


def cmd_eval(args) -> dict:
    if not args.pred_dir:
        raise ConfigError("--pred-dir is required for eval")
    iou = get_settings().IOU_THRESHOLD
    rows = []
    for recording in load_dataset(_require_data(args)):
        path = os.path.join(args.pred_dir, f"{recording.subject_id}_pred.csv")
        try:
            predicted = pd.read_csv(path)["label_pred"].to_numpy()
        except (OSError, KeyError) as e:
            raise IngestionError(f"Cannot read predictions {path}: {e}") from e
        result = evaluate(predicted, recording.labels, iou)
        rows.append(
            {
                "subject_id": recording.subject_id,
                "model": args.model or "-",
                "channels": args.channels or "-",
                "cohort": recording.cohort.value,
                "f1_micro": result.f1_micro,
                "f1_macro": result.f1_macro,
                "event_p": result.event_precision,
                "event_r": result.event_recall,
            }
        )
    out_dir = args.out_dir or args.pred_dir
    frame = pd.DataFrame(rows)
    table_path = os.path.join(out_dir, "evaluation.csv")
    frame.to_csv(table_path, index=False, lineterminator="\n")
    summary = frame.groupby("cohort")[["f1_micro", "f1_macro", "event_p", "event_r"]].mean()
    return {
        "status": "success",
        "table": table_path,
        "mean_f1_micro": float(frame["f1_micro"].mean()) if len(frame) else None,
        "by_cohort": summary.to_dict(orient="index"),
    }


def cmd_report(args) -> dict:
    out_dir = args.out_dir or get_settings().RESULTS_DIR
    store = ResultStore(os.path.join(out_dir, "store"))
    results = store.load_all()
    validated = [r for r in results if r.validation_f1_micro is not None]
    leaderboard = build_leaderboard(validated or results)
    if not leaderboard:
        raise ConfigError(f"No completed results under {store.root}")
    paths = report(leaderboard, os.path.join(out_dir, "report"), results)
    return {"status": "success", "reports": paths}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "search": cmd_search,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="Path to the dataset manifest.json")
    common.add_argument("--channels", type=int, choices=[1, 3, 5], help="Number of input electrodes")
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: SEED setting)")
    common.add_argument("--out-dir", help="Output directory")
    common.add_argument("--workers", type=int, default=1, help="Parallel training workers (default: 1)")
    common.add_argument("--window-len", type=int, help="Window length in samples")
    common.add_argument("--stride", type=int, help="Window stride in samples")
    common.add_argument("--offsets", help="Comma-separated window offsets in samples")

    parser = argparse.ArgumentParser(description="Blink segmentation of EEG recordings")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--n-hc", type=int, default=4, help="Healthy control subjects (default: 4)")
    synth.add_argument("--n-pd", type=int, default=4, help="PD subjects (default: 4)")
    synth.add_argument("--duration-s", type=float, default=60.0, help="Seconds per recording (default: 60)")
    synth.add_argument("--blink-rate", type=float, default=20.0, help="Blinks per minute (default: 20)")
    synth.add_argument("--noise-sd", type=float, default=10.0, help="Noise sd in µV (default: 10)")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int, help="Training epochs")
    training.add_argument("--batch-size", type=int, help="Windows per optimization step")
    training.add_argument("--lr", type=float, help="Learning rate")

    train_cmd = sub.add_parser("train", parents=[common, training], help="Train one configuration")
    train_cmd.add_argument("--model", required=True, help="Model kind, e.g. CNN-ST or CNN-RNN")
    train_cmd.add_argument("--filter-size", type=int)
    train_cmd.add_argument("--num-blocks", type=int)
    train_cmd.add_argument("--num-filters", type=int)
    train_cmd.add_argument("--num-rnn-blocks", type=int)
    train_cmd.add_argument("--num-units", type=int)
    train_cmd.add_argument("--rnn-cell", choices=[c.value for c in RnnCellKind])

    search = sub.add_parser("search", parents=[common, training], help="Run the grid search")
    search.add_argument("--grid", help="YAML grid file (default: built-in grid)")
    search.add_argument("--models", help="Comma-separated model kinds to keep")
    search.add_argument("--top-k", type=int, help="Finalists per model family")

    segment_cmd = sub.add_parser("segment", parents=[common], help="Segment recordings with a checkpoint")
    segment_cmd.add_argument("--checkpoint", help="Checkpoint file")

    eval_cmd = sub.add_parser("eval", parents=[common], help="Score predictions against labels")
    eval_cmd.add_argument("--pred-dir", help="Directory with <subject>_pred.csv files")
    eval_cmd.add_argument("--model", help="Model label for the output table")

    sub.add_parser("report", parents=[common], help="Write reports from stored search results")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        args.seed = get_settings().SEED
    try:
        _emit(COMMANDS[args.command](args))
        return 0
    except Exception as e:
        error = {"status": "error", "error_type": type(e).__name__, "message": str(e)}
        print(json.dumps(error), file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return 2 if isinstance(e, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
