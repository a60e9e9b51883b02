"""
Timepoint-level (micro) and event-level (macro) F1 scores for blink
segmentation. Blink is the positive class throughout.
"""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from src.core.errors import ContractError
from src.segmenter import BlinkEvent, events_from_labels

logger = logging.getLogger(__name__)


class ConfusionCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


def _pair(pred, true) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ContractError(f"Prediction length {pred.size} differs from truth length {true.size}")
    return pred == 1, true == 1


def confusion(pred, true) -> ConfusionCounts:
    p, t = _pair(pred, true)
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def f1(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_micro(pred, true) -> float:
    counts = confusion(pred, true)
    return f1(counts.precision, counts.recall)


def per_class_f1(pred, true) -> Dict[str, float]:
    counts = confusion(pred, true)
    flipped = ConfusionCounts(tp=counts.tn, fp=counts.fn, fn=counts.fp, tn=counts.tp)
    return {
        "blink": f1(counts.precision, counts.recall),
        "no_blink": f1(flipped.precision, flipped.recall),
    }


def random_guess_baseline(prior: float) -> float:
    """
    Macro average of per-class F1 for a uniform coin-flip predictor when a
    fraction `prior` of timepoints are blinks. Each class is predicted half
    the time, so its recall is 0.5 and its precision equals its prior.
    """
    if not 0.0 <= prior <= 1.0:
        raise ContractError("prior must lie in [0, 1]")
    return 0.5 * (f1(prior, 0.5) + f1(1.0 - prior, 0.5))


def interval_iou(a: BlinkEvent, b: BlinkEvent) -> float:
    """IoU of two inclusive sample intervals."""
    overlap = min(a.offset, b.offset) - max(a.onset, b.onset) + 1
    if overlap <= 0:
        return 0.0
    union = a.length + b.length - overlap
    return overlap / union


def event_match(
    pred_events: Sequence[BlinkEvent],
    true_events: Sequence[BlinkEvent],
    iou_threshold: float = 0.5,
) -> Tuple[List[Tuple[BlinkEvent, BlinkEvent]], List[BlinkEvent], List[BlinkEvent]]:
    """
    Greedy one-to-one matching in time order: each predicted event takes the
    earliest unmatched true event with IoU ≥ threshold.
    Returns (matches, unmatched_pred, unmatched_true).
    """
    matched_true = set()
    matches: List[Tuple[BlinkEvent, BlinkEvent]] = []
    unmatched_pred: List[BlinkEvent] = []
    first_candidate = 0
    for pred in pred_events:
        # true events ending before this prediction starts can never overlap later ones
        while first_candidate < len(true_events) and true_events[first_candidate].offset < pred.onset:
            first_candidate += 1
        hit = None
        for j in range(first_candidate, len(true_events)):
            true = true_events[j]
            if true.onset > pred.offset:
                break
            if j not in matched_true and interval_iou(pred, true) >= iou_threshold:
                hit = j
                break
        if hit is None:
            unmatched_pred.append(pred)
        else:
            matched_true.add(hit)
            matches.append((pred, true_events[hit]))
    unmatched_true = [t for j, t in enumerate(true_events) if j not in matched_true]
    return matches, unmatched_pred, unmatched_true


class MacroScores(BaseModel):
    f1_macro: float
    event_precision: float
    event_recall: float
    matched: int
    pred_events: int
    true_events: int
    degenerate: bool = False


def f1_macro(pred, true, iou_threshold: float = 0.5) -> MacroScores:
    """
    Event-level scores. With no events on either side precision and recall
    are 1 and the result is flagged degenerate.
    """
    _pair(pred, true)
    pred_events = events_from_labels(pred)
    true_events = events_from_labels(true)
    if not pred_events and not true_events:
        return MacroScores(
            f1_macro=1.0,
            event_precision=1.0,
            event_recall=1.0,
            matched=0,
            pred_events=0,
            true_events=0,
            degenerate=True,
        )
    matches, _, _ = event_match(pred_events, true_events, iou_threshold)
    precision = len(matches) / len(pred_events) if pred_events else 0.0
    recall = len(matches) / len(true_events) if true_events else 0.0
    return MacroScores(
        f1_macro=f1(precision, recall),
        event_precision=precision,
        event_recall=recall,
        matched=len(matches),
        pred_events=len(pred_events),
        true_events=len(true_events),
    )


class EvalReport(BaseModel):
    f1_micro: float
    f1_macro: float
    event_precision: float
    event_recall: float
    per_class_f1: Dict[str, float]
    counts: ConfusionCounts
    degenerate: bool = False


def evaluate(pred, true, iou_threshold: float = 0.5) -> EvalReport:
    counts = confusion(pred, true)
    macro = f1_macro(pred, true, iou_threshold)
    return EvalReport(
        f1_micro=f1(counts.precision, counts.recall),
        f1_macro=macro.f1_macro,
        event_precision=macro.event_precision,
        event_recall=macro.event_recall,
        per_class_f1=per_class_f1(pred, true),
        counts=counts,
        degenerate=macro.degenerate,
    )
