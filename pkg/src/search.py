"""
Grid search over model families: grid enumeration, a resumable result
store, the train/score worker, finalist validation and the leaderboard
reports.
"""
import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.architectures import (
    CONV_KINDS,
    HYBRID_KINDS,
    RNN_KINDS,
    HyperParams,
    ModelKind,
    RnnCellKind,
    assemble,
    display_name,
    parameter_count,
    resolve_model_kind,
    validate_hyperparams,
)
from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.core.errors import BlinkSegmentationError, ConfigError
from src.core.timing import measure_time
from src.metrics import evaluate
from src.recordings import ChannelConfig, Cohort, Recording, Split, make_windows, partition
from src.segmenter import WindowPlan, segment
from src.trainer import EpochRecord, TrainConfig, train

logger = logging.getLogger(__name__)

AXES = ("filter_size", "num_blocks", "num_channels", "num_filters", "num_rnn_blocks", "num_units")
CONV_AXES = ("filter_size", "num_blocks", "num_filters")
RNN_AXES = ("num_rnn_blocks", "num_units")
TABLE_COLUMNS = ("filter_size", "num_blocks", "num_filters", "num_rnn_blocks", "num_units")
DISTRIBUTION_METRICS = {"f1_micro": "search_f1_micro", "f1_macro": "search_f1_macro"}


class ModelAxes(BaseModel):
    filter_size: List[int] = Field(default_factory=list)
    num_blocks: List[int] = Field(default_factory=list)
    num_channels: List[int] = Field(default_factory=list)
    num_filters: List[int] = Field(default_factory=list)
    num_rnn_blocks: List[int] = Field(default_factory=list)
    num_units: List[int] = Field(default_factory=list)
    rnn_cell: List[RnnCellKind] = Field(default_factory=list)


class GridSpec(BaseModel):
    models: Dict[ModelKind, ModelAxes]


def _conv(filters=(5, 11, 15), blocks=(1, 2, 3, 4)) -> ModelAxes:
    return ModelAxes(
        filter_size=list(filters),
        num_blocks=list(blocks),
        num_channels=[1, 3, 5],
        num_filters=[8, 16, 32],
    )


def _rnn() -> ModelAxes:
    return ModelAxes(num_channels=[1, 3, 5], num_rnn_blocks=[1, 2, 3, 4], num_units=[8, 16, 32])


def _hybrid(filters) -> ModelAxes:
    axes = _conv(filters=filters, blocks=(1, 2, 3))
    return axes.model_copy(update={"num_rnn_blocks": [1, 2], "num_units": [8, 16, 32]})


def default_grid() -> GridSpec:
    """The published search grid (BiGRU is available but not searched)."""
    return GridSpec(
        models={
            ModelKind.CNN_DW: _conv(),
            ModelKind.CNN_ST: _conv(),
            ModelKind.CNN_RNN_DW: _hybrid((5, 15)),
            ModelKind.CNN_RNN_ST: _hybrid((5, 15)),
            ModelKind.BILSTM: _rnn(),
            ModelKind.GRU: _rnn(),
            ModelKind.LSTM: _rnn(),
            ModelKind.TCN_DW: _conv(),
            ModelKind.TCN_ST: _conv(),
            ModelKind.TCN_RNN_DW: _hybrid((5, 11, 15)),
            ModelKind.TCN_RNN_ST: _hybrid((5, 11, 15)),
        }
    )


def load_grid(path: str) -> GridSpec:
    """
    YAML grid: `models: {<name>: {<axis>: [values]}}`. Model names may use
    the published table labels.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read grid file {path}: {e}") from e
    models = raw.get("models") if isinstance(raw, dict) else None
    if not isinstance(models, dict) or not models:
        raise ConfigError(f"Grid file {path} needs a non-empty 'models' mapping")
    try:
        return GridSpec(models={resolve_model_kind(str(name)): ModelAxes(**(axes or {})) for name, axes in models.items()})
    except ValidationError as e:
        raise ConfigError(f"Invalid grid file {path}: {e}") from e


def enumerate_grid(spec: GridSpec) -> List[HyperParams]:
    """Cartesian product of every model's applicable axes, in a fixed order."""
    configs: List[HyperParams] = []
    for kind, axes in spec.models.items():
        applicable = {"num_channels"}
        if kind in CONV_KINDS:
            applicable.update(CONV_AXES)
        if kind in RNN_KINDS:
            applicable.update(RNN_AXES)
        names = [axis for axis in AXES if axis in applicable]
        for axis in AXES:
            values = getattr(axes, axis)
            if axis in applicable and not values:
                raise ConfigError(f"{kind.value}: axis '{axis}' must not be empty")
            if axis not in applicable and values:
                raise ConfigError(f"{kind.value}: axis '{axis}' is not applicable")
        if axes.rnn_cell and kind not in HYBRID_KINDS:
            raise ConfigError(f"{kind.value}: axis 'rnn_cell' is not applicable")
        cells = axes.rnn_cell or [None]
        for cell in cells:
            for values in itertools.product(*(getattr(axes, axis) for axis in names)):
                hp = HyperParams(model_kind=kind, rnn_cell=cell, **dict(zip(names, values)))
                validate_hyperparams(hp)
                configs.append(hp)
    return configs


class ConfigResult(BaseModel):
    hyperparams: HyperParams
    seed: int
    status: str = "ok"
    error: Optional[str] = None
    search_f1_micro: Optional[float] = None
    search_f1_macro: Optional[float] = None
    search_scores: Dict[str, float] = Field(default_factory=dict)
    validation_f1_micro: Optional[float] = None
    validation_f1_macro: Optional[float] = None
    validation_by_cohort: Dict[str, float] = Field(default_factory=dict)
    parameter_count: Optional[int] = None
    best_epoch: Optional[int] = None
    runtime_s: float = 0.0
    history: List[EpochRecord] = Field(default_factory=list)


class ResultStore:
    """
    One JSON file per (model, hyperparameter hash, seed) under `root`; the
    file's presence marks the configuration as completed. Checkpoints sit
    next to their result file.
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _stem(self, hp: HyperParams, seed: int) -> str:
        return os.path.join(self.root, hp.model_kind.value, f"{hp.key()}-s{seed}")

    def result_path(self, hp: HyperParams, seed: int) -> str:
        return self._stem(hp, seed) + ".json"

    def checkpoint_path(self, hp: HyperParams, seed: int) -> str:
        return self._stem(hp, seed) + ".ckpt"

    def has(self, hp: HyperParams, seed: int) -> bool:
        return os.path.exists(self.result_path(hp, seed))

    def write(self, result: ConfigResult) -> None:
        path = self.result_path(result.hyperparams, result.seed)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as handle:
            handle.write(result.model_dump_json(indent=2))
        os.replace(tmp_path, path)

    def read(self, hp: HyperParams, seed: int) -> ConfigResult:
        with open(self.result_path(hp, seed), "r", encoding="utf-8") as handle:
            return ConfigResult.model_validate_json(handle.read())

    def load_all(self) -> List[ConfigResult]:
        results = []
        for directory, _, files in sorted(os.walk(self.root)):
            for name in sorted(files):
                if name.endswith(".json"):
                    with open(os.path.join(directory, name), "r", encoding="utf-8") as handle:
                        results.append(ConfigResult.model_validate_json(handle.read()))
        return results


def score_recordings(
    checkpoint: Checkpoint,
    recordings: Sequence[Recording],
    plan: WindowPlan,
    iou_threshold: float = 0.5,
) -> Dict[str, Dict[str, float]]:
    """Per-subject f1_micro / f1_macro of a checkpoint."""
    model = checkpoint.to_model()
    config = ChannelConfig.for_count(checkpoint.hyperparams.num_channels)
    scores = {}
    for recording in recordings:
        labels = segment(model, recording, config, plan)
        report = evaluate(labels, recording.labels, iou_threshold)
        scores[recording.subject_id] = {
            "f1_micro": report.f1_micro,
            "f1_macro": report.f1_macro,
            "cohort": recording.cohort.value,
        }
    return scores


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def train_and_score(
    hp: HyperParams,
    recordings: Sequence[Recording],
    split: Split,
    train_cfg: TrainConfig,
    plan: WindowPlan,
    store: Optional[ResultStore] = None,
    iou_threshold: float = 0.5,
) -> ConfigResult:
    """Train one configuration on the train split and score it on the search split."""
    started = time.perf_counter()
    try:
        config = ChannelConfig.for_count(hp.num_channels)
        train_set = partition(recordings, split.train)
        search_set = partition(recordings, split.search)
        train_windows = make_windows(train_set, config, plan.window_len, plan.stride)
        search_windows = make_windows(search_set, config, plan.window_len, plan.window_len) if search_set else None
        outcome = train(hp, train_windows, train_cfg, search_windows)
        scores = score_recordings(outcome.checkpoint, search_set, plan, iou_threshold)
        if store is not None:
            save_checkpoint(outcome.checkpoint, store.checkpoint_path(hp, train_cfg.seed))
        result = ConfigResult(
            hyperparams=hp,
            seed=train_cfg.seed,
            search_f1_micro=_mean([s["f1_micro"] for s in scores.values()]),
            search_f1_macro=_mean([s["f1_macro"] for s in scores.values()]),
            search_scores={subject: s["f1_micro"] for subject, s in scores.items()},
            parameter_count=parameter_count(assemble(hp)),
            best_epoch=outcome.best_epoch,
            history=outcome.history,
        )
    except Exception as e:
        logger.error(f"Configuration {hp.model_kind.value} [{hp.key()}] failed: {e}", exc_info=True)
        result = ConfigResult(hyperparams=hp, seed=train_cfg.seed, status="failed", error=f"{type(e).__name__}: {e}")
    result.runtime_s = time.perf_counter() - started
    if store is not None:
        store.write(result)
    return result


def validate_finalist(
    result: ConfigResult,
    recordings: Sequence[Recording],
    split: Split,
    plan: WindowPlan,
    store: ResultStore,
    iou_threshold: float = 0.5,
) -> ConfigResult:
    """Score a finalist once on the held-out validation subjects, per cohort."""
    validation = partition(recordings, split.validation)
    if not validation:
        return result
    checkpoint = load_checkpoint(store.checkpoint_path(result.hyperparams, result.seed))
    scores = score_recordings(checkpoint, validation, plan, iou_threshold)
    by_cohort = {}
    for cohort in Cohort:
        values = [s["f1_micro"] for s in scores.values() if s["cohort"] == cohort.value]
        if values:
            by_cohort[cohort.value] = float(np.mean(values))
    updated = result.model_copy(
        update={
            "validation_f1_micro": _mean([s["f1_micro"] for s in scores.values()]),
            "validation_f1_macro": _mean([s["f1_macro"] for s in scores.values()]),
            "validation_by_cohort": by_cohort,
        }
    )
    store.write(updated)
    return updated


class LeaderboardRow(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_kind: ModelKind
    hyperparams: HyperParams
    mean_f1_micro: float
    score_source: str
    search_f1_micro: Optional[float] = None
    validation_f1_micro: Optional[float] = None
    f1_by_cohort: Dict[str, float] = Field(default_factory=dict)
    runtime_s: float = 0.0


def _select_finalists(results: Sequence[ConfigResult], top_k: int) -> List[ConfigResult]:
    finalists = []
    by_kind: Dict[ModelKind, List[ConfigResult]] = {}
    for result in results:
        if result.status == "ok" and result.search_f1_micro is not None:
            by_kind.setdefault(result.hyperparams.model_kind, []).append(result)
    for kind in by_kind:
        ranked = sorted(by_kind[kind], key=lambda r: (-r.search_f1_micro, r.hyperparams.key()))
        finalists.extend(ranked[:top_k])
    return finalists


def build_leaderboard(results: Sequence[ConfigResult]) -> List[LeaderboardRow]:
    rows = []
    for result in results:
        if result.validation_f1_micro is not None:
            score, source = result.validation_f1_micro, "validation"
        elif result.search_f1_micro is not None:
            score, source = result.search_f1_micro, "search"
        else:
            continue
        rows.append(
            LeaderboardRow(
                model_kind=result.hyperparams.model_kind,
                hyperparams=result.hyperparams,
                mean_f1_micro=score,
                score_source=source,
                search_f1_micro=result.search_f1_micro,
                validation_f1_micro=result.validation_f1_micro,
                f1_by_cohort=result.validation_by_cohort,
                runtime_s=result.runtime_s,
            )
        )
    return sorted(rows, key=lambda row: (-row.mean_f1_micro, row.model_kind.value, row.hyperparams.key()))


@measure_time
def run_search(
    grid: Sequence[HyperParams],
    recordings: Sequence[Recording],
    split: Split,
    train_cfg: TrainConfig,
    plan: WindowPlan,
    store: ResultStore,
    workers: int = 1,
    top_k: int = 3,
    iou_threshold: float = 0.5,
) -> List[LeaderboardRow]:
    """
    Train every configuration not already in `store`, then validate the
    top-k configurations of each model family. Failed configurations are
    recorded and skipped.
    """
    if not grid:
        raise ConfigError("The search grid is empty")
    if not recordings:
        raise ConfigError("The dataset is empty")
    pending = [hp for hp in grid if not store.has(hp, train_cfg.seed)]
    logger.info(f"Search: {len(grid)} configurations, {len(grid) - len(pending)} already completed")

    if workers <= 1:
        for hp in pending:
            train_and_score(hp, recordings, split, train_cfg, plan, store, iou_threshold)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(train_and_score, hp, recordings, split, train_cfg, plan, store, iou_threshold): hp
                for hp in pending
            }
            for future in as_completed(futures):
                hp = futures[future]
                try:
                    future.result()
                except Exception as e:
                    logger.error(f"Worker for {hp.model_kind.value} [{hp.key()}] crashed: {e}", exc_info=True)
                    store.write(
                        ConfigResult(hyperparams=hp, seed=train_cfg.seed, status="failed", error=str(e))
                    )

    results = [store.read(hp, train_cfg.seed) for hp in grid if store.has(hp, train_cfg.seed)]
    finalists = _select_finalists(results, top_k)
    validated = {}
    for result in finalists:
        if result.validation_f1_micro is None:
            try:
                result = validate_finalist(result, recordings, split, plan, store, iou_threshold)
            except BlinkSegmentationError as e:
                logger.error(f"Validation of {result.hyperparams.key()} failed: {e}")
        validated[result.hyperparams.key()] = result
    failed = sum(1 for r in results if r.status != "ok")
    if failed:
        logger.warning(f"{failed} configuration(s) failed during the search")
    return build_leaderboard(list(validated.values()))


def _table_cell(hp: HyperParams, column: str) -> str:
    value = getattr(hp, column)
    return "-" if value is None else str(value)


def score_distribution(results: Sequence[ConfigResult], metric: str = "f1_micro") -> pd.DataFrame:
    """Per-model min / quartiles / max of search `f1_micro` or `f1_macro` over all configurations."""
    if metric not in DISTRIBUTION_METRICS:
        raise ConfigError(f"metric must be one of {sorted(DISTRIBUTION_METRICS)}, got {metric!r}")
    attribute = DISTRIBUTION_METRICS[metric]
    frame = pd.DataFrame(
        [
            {"model": display_name(r.hyperparams.model_kind), "score": getattr(r, attribute)}
            for r in results
            if r.status == "ok" and getattr(r, attribute) is not None
        ],
        columns=["model", "score"],
    )
    if frame.empty:
        return pd.DataFrame(columns=["model", "count", "min", "q1", "median", "q3", "max"])
    grouped = frame.groupby("model")["score"]
    summary = pd.DataFrame(
        {
            "count": grouped.count(),
            "min": grouped.min(),
            "q1": grouped.quantile(0.25),
            "median": grouped.median(),
            "q3": grouped.quantile(0.75),
            "max": grouped.max(),
        }
    )
    return summary.reset_index()


def hyperparameter_heatmap(results: Sequence[ConfigResult]) -> pd.DataFrame:
    """Mean search F1-micro per model for every value of every hyperparameter."""
    records = []
    for result in results:
        if result.status != "ok" or result.search_f1_micro is None:
            continue
        for axis in AXES:
            value = getattr(result.hyperparams, axis)
            if value is not None:
                records.append(
                    {
                        "model": display_name(result.hyperparams.model_kind),
                        "hyperparameter": axis,
                        "value": value,
                        "score": result.search_f1_micro,
                    }
                )
    frame = pd.DataFrame(records, columns=["model", "hyperparameter", "value", "score"])
    if frame.empty:
        return pd.DataFrame(columns=["model", "hyperparameter", "value", "mean_f1_micro", "count"])
    table = frame.groupby(["model", "hyperparameter", "value"])["score"].agg(["mean", "count"]).reset_index()
    return table.rename(columns={"mean": "mean_f1_micro"})


def report(
    leaderboard: Sequence[LeaderboardRow],
    out_dir: str,
    results: Optional[Sequence[ConfigResult]] = None,
) -> Dict[str, str]:
    """
    Write the report tables into `out_dir`; returns their paths by name.
    table_ii.csv holds the best row of each model family.
    """
    if not leaderboard:
        raise ConfigError("Cannot report an empty leaderboard")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    best: Dict[ModelKind, LeaderboardRow] = {}
    for row in leaderboard:
        best.setdefault(row.model_kind, row)
    table = pd.DataFrame(
        [
            {
                "model": display_name(row.model_kind),
                **{column: _table_cell(row.hyperparams, column) for column in TABLE_COLUMNS},
                "mean_f1_micro": round(row.mean_f1_micro, 5),
                "num_channels": row.hyperparams.num_channels,
                "search_f1_micro": row.search_f1_micro,
                "validation_f1_micro": row.validation_f1_micro,
            }
            for row in best.values()
        ]
    )
    paths["table_ii"] = os.path.join(out_dir, "table_ii.csv")
    table.to_csv(paths["table_ii"], index=False, lineterminator="\n")

    board = pd.DataFrame(
        [
            {
                "model": display_name(row.model_kind),
                "hyperparams_key": row.hyperparams.key(),
                **{column: _table_cell(row.hyperparams, column) for column in TABLE_COLUMNS},
                "num_channels": row.hyperparams.num_channels,
                "rnn_cell": row.hyperparams.cell_kind.value if row.hyperparams.cell_kind else "-",
                "mean_f1_micro": row.mean_f1_micro,
                "score_source": row.score_source,
                "search_f1_micro": row.search_f1_micro,
                "validation_f1_micro": row.validation_f1_micro,
                "runtime_s": round(row.runtime_s, 3),
            }
            for row in leaderboard
        ]
    )
    paths["leaderboard"] = os.path.join(out_dir, "leaderboard.csv")
    board.to_csv(paths["leaderboard"], index=False, lineterminator="\n")

    cohorts = pd.DataFrame(
        [
            {"model": display_name(row.model_kind), "hyperparams_key": row.hyperparams.key(), "cohort": cohort, "f1_micro": score}
            for row in leaderboard
            for cohort, score in sorted(row.f1_by_cohort.items())
        ],
        columns=["model", "hyperparams_key", "cohort", "f1_micro"],
    )
    paths["cohorts"] = os.path.join(out_dir, "cohorts.csv")
    cohorts.to_csv(paths["cohorts"], index=False, lineterminator="\n")

    if results is not None:
        paths["distributions"] = os.path.join(out_dir, "distributions.csv")
        score_distribution(results).to_csv(paths["distributions"], index=False, lineterminator="\n")
        paths["distributions_macro"] = os.path.join(out_dir, "distributions_macro.csv")
        score_distribution(results, metric="f1_macro").to_csv(
            paths["distributions_macro"], index=False, lineterminator="\n"
        )
        paths["heatmap"] = os.path.join(out_dir, "heatmap.csv")
        hyperparameter_heatmap(results).to_csv(paths["heatmap"], index=False, lineterminator="\n")

    logger.info(f"Report written to {out_dir}: {sorted(paths)}")
    return paths


def write_history(path: str, history: Sequence[EpochRecord]) -> None:
    frame = pd.DataFrame([record.model_dump() for record in history], columns=["epoch", "loss", "search_f1_micro"])
    frame.to_csv(path, index=False, lineterminator="\n")


def summarize(results: Sequence[ConfigResult]) -> Dict[str, int]:
    return {
        "completed": sum(1 for r in results if r.status == "ok"),
        "failed": sum(1 for r in results if r.status != "ok"),
    }
