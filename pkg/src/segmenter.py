"""
Windowed inference with shifted-offset voting, and blink-event extraction.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from src.architectures import SequenceModel
from src.core.config import Settings
from src.core.errors import ConfigError, ContractError, DimensionError, InputTooShortError
from src.recordings import ChannelConfig, Recording, select_channels

logger = logging.getLogger(__name__)

INFERENCE_BATCH = 32


class WindowPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_len: int = 1024
    stride: int = 1024
    offsets: List[int] = [0, 256, 512, 768]
    offset_weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check(self) -> "WindowPlan":
        if self.window_len < 1 or self.stride < 1:
            raise ValueError("window_len and stride must be positive")
        if self.stride > self.window_len:
            raise ValueError("stride cannot exceed window_len")
        if not self.offsets or len(set(self.offsets)) != len(self.offsets):
            raise ValueError("offsets must be a non-empty list of distinct values")
        if any(not 0 <= o < self.window_len for o in self.offsets):
            raise ValueError("every offset must lie in [0, window_len)")
        if self.offset_weights is not None:
            if len(self.offset_weights) != len(self.offsets):
                raise ValueError("offset_weights needs one weight per offset")
            if any(w <= 0 for w in self.offset_weights):
                raise ValueError("offset weights must be positive")
        return self

    @classmethod
    def from_settings(cls, settings: Settings) -> "WindowPlan":
        return build_plan(
            window_len=settings.WINDOW_LEN,
            stride=settings.STRIDE,
            offsets=settings.OFFSETS,
            offset_weights=settings.OFFSET_WEIGHTS,
        )

    def weight_of(self, offset: int) -> float:
        if self.offset_weights is None:
            return 1.0
        return self.offset_weights[self.offsets.index(offset)]


def build_plan(**fields) -> WindowPlan:
    try:
        return WindowPlan(**fields)
    except ValueError as e:
        raise ConfigError(f"Invalid window plan: {e}") from e


class WindowSpan(BaseModel):
    """Half-open sample range [start, end) with its vote weight."""
    model_config = ConfigDict(frozen=True)

    start: int
    end: int
    weight: float = 1.0

    @property
    def length(self) -> int:
        return self.end - self.start


def plan_windows(num_samples: int, plan: WindowPlan) -> List[WindowSpan]:
    """
    Spans [offset + k·stride, +window_len) fully inside [0, T) for each
    offset, plus one window right-aligned to T when the tail is otherwise
    uncovered.
    """
    L = plan.window_len
    if num_samples < L:
        raise InputTooShortError(f"Recording has {num_samples} samples, window needs {L}")
    spans: List[WindowSpan] = []
    seen = set()
    for offset in plan.offsets:
        weight = plan.weight_of(offset)
        for start in range(offset, num_samples - L + 1, plan.stride):
            if (start, start + L) not in seen:
                seen.add((start, start + L))
                spans.append(WindowSpan(start=start, end=start + L, weight=weight))
    covered_to = max(span.end for span in spans)
    if covered_to < num_samples and (num_samples - L, num_samples) not in seen:
        spans.append(WindowSpan(start=num_samples - L, end=num_samples, weight=plan.weight_of(plan.offsets[0])))
    return spans


def vote(predictions: Sequence[np.ndarray], spans: Sequence[WindowSpan], num_samples: int) -> np.ndarray:
    """
    Weighted majority per sample: 1 iff blink votes outweigh no-blink votes.
    Ties and uncovered samples give 0.
    """
    if len(predictions) != len(spans):
        raise ContractError(f"{len(predictions)} predictions for {len(spans)} spans")
    blink = np.zeros(num_samples)
    no_blink = np.zeros(num_samples)
    for prediction, span in zip(predictions, spans):
        prediction = np.asarray(prediction)
        if prediction.shape != (span.length,):
            raise ContractError(
                f"Prediction of shape {prediction.shape} does not fit span [{span.start}, {span.end})"
            )
        if span.start < 0 or span.end > num_samples:
            raise ContractError(f"Span [{span.start}, {span.end}) lies outside [0, {num_samples})")
        blink[span.start:span.end] += span.weight * (prediction == 1)
        no_blink[span.start:span.end] += span.weight * (prediction == 0)
    return (blink > no_blink).astype(np.int8)


def segment_array(model: SequenceModel, channels: np.ndarray, plan: WindowPlan) -> np.ndarray:
    """Labels for a selected channel matrix [C×T]."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2:
        raise DimensionError(f"Expected a [C×T] matrix, got shape {channels.shape}")
    if channels.shape[0] != model.spec.in_width:
        raise ContractError(
            f"Model expects {model.spec.in_width} channels, input has {channels.shape[0]}"
        )
    num_samples = channels.shape[1]
    if num_samples < plan.window_len:
        logger.warning(f"Zero-padding {num_samples} samples to one window of {plan.window_len}")
        padded = np.pad(channels, ((0, 0), (0, plan.window_len - num_samples)))
        return segment_array(model, padded, plan)[:num_samples]

    spans = plan_windows(num_samples, plan)
    inference = model.frozen()
    predictions: List[np.ndarray] = []
    for first in range(0, len(spans), INFERENCE_BATCH):
        batch = spans[first:first + INFERENCE_BATCH]
        windows = np.stack([channels[:, span.start:span.end] for span in batch])
        predictions.extend(inference.predict(windows))
    return vote(predictions, spans, num_samples)


def segment(model: SequenceModel, recording: Recording, config: ChannelConfig, plan: WindowPlan) -> np.ndarray:
    if model.spec.in_width != config.count:
        raise ContractError(f"Model takes {model.spec.in_width} channels, config selects {config.count}")
    labels = segment_array(model, select_channels(recording, config), plan)
    logger.info(
        f"Segmented {recording.subject_id}: {int(labels.sum())} blink samples of {labels.shape[0]}"
    )
    return labels


class BlinkEvent(BaseModel):
    """Maximal blink run; both ends inclusive."""
    model_config = ConfigDict(frozen=True)

    onset: int
    offset: int

    @model_validator(mode="after")
    def _ordered(self) -> "BlinkEvent":
        if self.onset > self.offset:
            raise ValueError("onset must not exceed offset")
        return self

    @property
    def length(self) -> int:
        return self.offset - self.onset + 1


def events_from_labels(labels) -> List[BlinkEvent]:
    labels = np.asarray(labels).astype(np.int8).reshape(-1)
    if labels.size == 0:
        return []
    padded = np.concatenate(([0], labels, [0]))
    edges = np.diff(padded)
    onsets = np.flatnonzero(edges == 1)
    offsets = np.flatnonzero(edges == -1) - 1
    return [BlinkEvent(onset=int(a), offset=int(b)) for a, b in zip(onsets, offsets)]


def rasterize(events: Sequence[BlinkEvent], num_samples: int) -> np.ndarray:
    labels = np.zeros(num_samples, dtype=np.int8)
    for event in events:
        labels[event.onset:event.offset + 1] = 1
    return labels


class BlinkStats(BaseModel):
    blink_count: int
    blink_rate_per_min: float
    mean_duration_ms: Optional[float] = None
    sd_duration_ms: Optional[float] = None
    mean_interval_s: Optional[float] = None
    interval_cv: Optional[float] = None


def blink_statistics(labels, sample_rate: float) -> BlinkStats:
    """
    Blink rate, duration and inter-blink interval summary. Intervals are
    measured onset to onset; fields without enough events are None.
    """
    if sample_rate <= 0:
        raise ConfigError("sample_rate must be positive")
    labels = np.asarray(labels).reshape(-1)
    events = events_from_labels(labels)
    minutes = labels.size / sample_rate / 60.0
    stats = {
        "blink_count": len(events),
        "blink_rate_per_min": len(events) / minutes if minutes > 0 else 0.0,
    }
    if events:
        durations = np.array([e.length for e in events]) * 1000.0 / sample_rate
        stats["mean_duration_ms"] = float(durations.mean())
        stats["sd_duration_ms"] = float(durations.std())
    if len(events) >= 2:
        intervals = np.diff([e.onset for e in events]) / sample_rate
        mean_interval = float(intervals.mean())
        stats["mean_interval_s"] = mean_interval
        stats["interval_cv"] = float(intervals.std() / mean_interval)
    return BlinkStats(**stats)


def write_predictions(path: str, labels: np.ndarray) -> None:
    """Predicted labels as CSV `t,label_pred`."""
    labels = np.asarray(labels).reshape(-1).astype(int)
    frame = pd.DataFrame({"t": np.arange(labels.size), "label_pred": labels})
    frame.to_csv(path, index=False, lineterminator="\n")
