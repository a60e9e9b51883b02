"""
Recording ingestion, electrode selection, windowing and subject-level splits.

Recording CSV: header `t,Fp1,Fp2,Fz,F3,F4,label` (any subset of the electrode
columns, Fp1 required), values in µV, label in {0, 1}.
Manifest JSON: array of {subject_id, cohort, path, sample_rate_hz}; paths are
resolved relative to the manifest file.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from src.core.errors import ConfigError, IngestionError, ParseError, SelectionError

logger = logging.getLogger(__name__)

STUDY_ELECTRODES = ("Fp1", "Fp2", "Fz", "F3", "F4")
TEN_TWENTY = frozenset(
    STUDY_ELECTRODES
    + ("F7", "F8", "C3", "C4", "Cz", "T3", "T4", "T5", "T6", "P3", "P4", "Pz", "O1", "O2", "A1", "A2")
)
REQUIRED_ELECTRODE = "Fp1"
STUDY_SAMPLE_RATE_HZ = 512

CHANNEL_CONFIGS: Dict[int, Tuple[str, ...]] = {
    1: ("Fp1",),
    3: ("Fp1", "Fz", "Fp2"),
    5: ("Fp1", "Fp2", "Fz", "F3", "F4"),
}


class Cohort(str, Enum):
    HC = "HC"
    PD = "PD"


@dataclass(frozen=True)
class ChannelConfig:
    count: int
    names: Tuple[str, ...]

    @classmethod
    def for_count(cls, count: int) -> "ChannelConfig":
        if count not in CHANNEL_CONFIGS:
            raise ConfigError(f"Channel count must be one of {sorted(CHANNEL_CONFIGS)}, got {count}")
        return cls(count=count, names=CHANNEL_CONFIGS[count])


@dataclass(frozen=True, eq=False)
class Recording:
    """
    One subject's recording. `channels` holds per-channel z-scored values
    [C×T]; `channel_mean` / `channel_sd` (µV) invert the normalization.
    """
    subject_id: str
    cohort: Cohort
    sample_rate: float
    channel_names: Tuple[str, ...]
    channels: np.ndarray
    labels: np.ndarray
    channel_mean: np.ndarray
    channel_sd: np.ndarray
    rate_flagged: bool = field(default=False)

    def __post_init__(self):
        if self.channels.ndim != 2 or self.channels.shape[0] != len(self.channel_names):
            raise IngestionError(f"{self.subject_id}: channel matrix does not match channel names")
        if self.labels.shape != (self.channels.shape[1],):
            raise IngestionError(f"{self.subject_id}: labels length differs from channel length")
        if self.sample_rate <= 0:
            raise IngestionError(f"{self.subject_id}: sample rate must be positive")
        unknown = [name for name in self.channel_names if name not in TEN_TWENTY]
        if unknown:
            raise IngestionError(f"{self.subject_id}: channels {unknown} are not 10-20 electrodes")
        self.channels.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    @property
    def blink_fraction(self) -> float:
        return float(self.labels.mean()) if self.num_samples else 0.0

    def denormalize(self) -> np.ndarray:
        """Channel values back in µV."""
        return self.channels * self.channel_sd[:, None] + self.channel_mean[:, None]


def normalize_channels(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel z-score; flat channels keep sd 1."""
    mean = values.mean(axis=1)
    sd = values.std(axis=1)
    sd = np.where(sd > 0, sd, 1.0)
    return (values - mean[:, None]) / sd[:, None], mean, sd


def make_recording(
    subject_id: str,
    cohort: Cohort,
    sample_rate: float,
    channel_names: Sequence[str],
    values_uv: np.ndarray,
    labels: np.ndarray,
) -> Recording:
    """Build a normalized Recording from raw µV values."""
    normalized, mean, sd = normalize_channels(np.asarray(values_uv, dtype=np.float64))
    flagged = sample_rate != STUDY_SAMPLE_RATE_HZ
    if flagged:
        logger.warning(f"Recording {subject_id} sampled at {sample_rate} Hz, expected {STUDY_SAMPLE_RATE_HZ} Hz")
    return Recording(
        subject_id=subject_id,
        cohort=Cohort(cohort),
        sample_rate=float(sample_rate),
        channel_names=tuple(channel_names),
        channels=normalized,
        labels=np.asarray(labels, dtype=np.int8),
        channel_mean=mean,
        channel_sd=sd,
        rate_flagged=flagged,
    )


class ManifestEntry(BaseModel):
    subject_id: str
    cohort: Cohort
    path: str
    sample_rate_hz: float


def load_manifest(path: str) -> List[ManifestEntry]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Cannot read manifest {path}: {e}") from e
    if not isinstance(raw, list):
        raise IngestionError(f"Manifest {path} must be a JSON array")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for position, item in enumerate(raw):
        try:
            entry = ManifestEntry(**item)
        except (ValidationError, TypeError) as e:
            raise IngestionError(f"Manifest entry {position} is invalid: {e}") from e
        if not os.path.isabs(entry.path):
            entry = entry.model_copy(update={"path": os.path.join(base, entry.path)})
        entries.append(entry)
    return entries


def write_manifest(path: str, entries: Iterable[ManifestEntry]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    payload = []
    for entry in entries:
        item = entry.model_dump(mode="json")
        if os.path.isabs(item["path"]):
            item["path"] = os.path.relpath(item["path"], base)
        payload.append(item)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, indent=2)


def _first_bad_row(column: pd.Series) -> Optional[int]:
    parsed = pd.to_numeric(column, errors="coerce")
    bad = parsed.isna() | ~np.isfinite(parsed.fillna(0.0))
    if bad.any():
        return int(np.flatnonzero(bad.to_numpy())[0])
    return None


def load_recording(path: str, entry: ManifestEntry) -> Recording:
    """
    Parse one recording CSV. Row indices in errors count data rows from 0.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"Cannot read recording {path}: {e}") from e

    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    for required in ("t", "label", REQUIRED_ELECTRODE):
        if required not in columns:
            raise IngestionError(f"Recording {path} is missing required column '{required}'")
    electrodes = [c for c in columns if c not in ("t", "label")]
    unknown = [c for c in electrodes if c not in TEN_TWENTY]
    if unknown:
        raise IngestionError(f"Recording {path} has non 10-20 columns {unknown}")

    for column in ["t"] + electrodes + ["label"]:
        row = _first_bad_row(frame[column])
        if row is not None:
            raise ParseError(f"Non-numeric value in column '{column}' of {path}", row=row)

    labels = pd.to_numeric(frame["label"]).to_numpy()
    invalid = np.flatnonzero((labels != 0) & (labels != 1))
    if invalid.size:
        raise ParseError(f"Label outside {{0,1}} in {path}", row=int(invalid[0]))

    values = frame[electrodes].apply(pd.to_numeric).to_numpy(dtype=np.float64).T
    recording = make_recording(
        subject_id=entry.subject_id,
        cohort=entry.cohort,
        sample_rate=entry.sample_rate_hz,
        channel_names=electrodes,
        values_uv=values,
        labels=labels.astype(np.int8),
    )
    logger.info(
        f"Loaded {entry.subject_id} ({entry.cohort.value}): {len(electrodes)} channels, "
        f"{recording.num_samples} samples, blink fraction {recording.blink_fraction:.3f}"
    )
    return recording


def load_dataset(manifest_path: str) -> List[Recording]:
    return [load_recording(entry.path, entry) for entry in load_manifest(manifest_path)]


def write_recording(path: str, recording: Recording) -> None:
    """Write a recording in the CSV format, values in µV."""
    values = recording.denormalize()
    frame = pd.DataFrame({"t": np.arange(recording.num_samples)})
    for row, name in enumerate(recording.channel_names):
        frame[name] = values[row]
    frame["label"] = recording.labels.astype(int)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def select_channels(recording: Recording, config: ChannelConfig) -> np.ndarray:
    """Rows of `recording` in the order of `config.names` ([count×T])."""
    rows = []
    for name in config.names:
        if name not in recording.channel_names:
            raise SelectionError(name, recording.subject_id)
        rows.append(recording.channel_names.index(name))
    return np.asarray(recording.channels[rows])


def make_windows(
    recordings: Sequence[Recording],
    config: ChannelConfig,
    window_len: int,
    stride: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fixed-length training windows. Returns inputs [N×C×L] and labels [N×L];
    recordings shorter than one window are zero-padded on the right with
    no-blink labels.
    """
    stride = stride or window_len
    inputs, targets = [], []
    for recording in recordings:
        x = select_channels(recording, config)
        y = np.asarray(recording.labels)
        if x.shape[1] < window_len:
            pad = window_len - x.shape[1]
            x = np.pad(x, ((0, 0), (0, pad)))
            y = np.pad(y, (0, pad))
        for start in range(0, x.shape[1] - window_len + 1, stride):
            inputs.append(x[:, start:start + window_len])
            targets.append(y[start:start + window_len])
    if not inputs:
        return np.zeros((0, config.count, window_len)), np.zeros((0, window_len), dtype=np.int8)
    return np.stack(inputs), np.stack(targets).astype(np.int8)


@dataclass(frozen=True)
class Split:
    train: frozenset
    search: frozenset
    validation: frozenset
    note: str = ""

    def __post_init__(self):
        if self.train & self.search or self.train & self.validation or self.search & self.validation:
            raise ConfigError("Split subsets must be pairwise disjoint")


VALIDATION_PER_COHORT = 3
HELD_OUT_FRACTION = 0.2


def make_split(subjects: Sequence[Tuple[str, Cohort]], seed: int) -> Split:
    """
    Subject-level split: validation takes 3 HC + 3 PD when every cohort keeps
    at least one training subject, otherwise 20% per cohort (equalized
    across cohorts); the search set takes 20% of the remainder.
    """
    if not subjects:
        raise ConfigError("Cannot split an empty subject list")
    rng = np.random.default_rng(seed)
    by_cohort: Dict[Cohort, List[str]] = {}
    for subject_id, cohort in sorted(subjects, key=lambda item: item[0]):
        by_cohort.setdefault(Cohort(cohort), []).append(subject_id)

    notes = []
    if all(len(ids) > VALIDATION_PER_COHORT for ids in by_cohort.values()):
        per_cohort = VALIDATION_PER_COHORT
    else:
        smallest = min(len(ids) for ids in by_cohort.values())
        per_cohort = max(1, int(round(smallest * HELD_OUT_FRACTION))) if smallest >= 2 else 0
        notes.append(f"proportional validation fallback: {per_cohort} per cohort")

    validation, remainder = [], []
    for cohort in sorted(by_cohort, key=lambda c: c.value):
        ids = list(by_cohort[cohort])
        rng.shuffle(ids)
        validation.extend(ids[:per_cohort])
        remainder.extend(ids[per_cohort:])

    remainder.sort()
    rng.shuffle(remainder)
    n_search = int(round(len(remainder) * HELD_OUT_FRACTION)) if len(remainder) >= 2 else 0
    if len(remainder) >= 2:
        n_search = max(1, n_search)
    search, train = remainder[:n_search], remainder[n_search:]

    if not validation:
        notes.append("validation split is empty")
    note = "; ".join(notes)
    if note:
        logger.warning(f"make_split: {note}")
    return Split(train=frozenset(train), search=frozenset(search), validation=frozenset(validation), note=note)


def subjects_of(recordings: Sequence[Recording]) -> List[Tuple[str, Cohort]]:
    return [(r.subject_id, r.cohort) for r in recordings]


def partition(recordings: Sequence[Recording], subject_ids: Iterable[str]) -> List[Recording]:
    wanted = set(subject_ids)
    return [r for r in recordings if r.subject_id in wanted]
