"""
Deterministic synthetic EEG with labelled eye blinks.

Blinks are raised-cosine pulses scaled per electrode, added to white noise
and, for PD subjects, a low-frequency tremor sinusoid on every channel.
"""
import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from src.core.errors import ConfigError
from src.recordings import (
    STUDY_ELECTRODES,
    Cohort,
    ManifestEntry,
    Recording,
    make_recording,
    write_manifest,
    write_recording,
)

logger = logging.getLogger(__name__)

SPATIAL_GAINS = {"Fp1": 1.0, "Fp2": 1.0, "Fz": 0.8, "F3": 0.6, "F4": 0.6}
LABEL_THRESHOLD = 0.1
MIN_BLINK_GAP_MS = 50.0


class Tremor(BaseModel):
    freq_hz: float = 5.0
    amplitude_uv: float = 20.0

    @field_validator("freq_hz")
    @classmethod
    def _tremor_band(cls, value: float) -> float:
        if not 4.0 <= value <= 6.0:
            raise ValueError("tremor frequency must lie in 4-6 Hz")
        return value


class SynthConfig(BaseModel):
    duration_s: float = 60.0
    sample_rate_hz: float = 512.0
    blink_rate_per_min: float = 20.0
    blink_amplitude_uv: float = 150.0
    blink_width_ms: Tuple[float, float] = (100.0, 300.0)
    noise_sd_uv: float = 10.0
    tremor: Optional[Tremor] = None
    seed: int = 0
    subject_id: str = "synth-000"
    cohort: Cohort = Cohort.HC

    @model_validator(mode="after")
    def _ranges(self) -> "SynthConfig":
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.blink_rate_per_min < 0:
            raise ValueError("blink_rate_per_min cannot be negative")
        if self.blink_amplitude_uv <= 100:
            raise ValueError("blink_amplitude_uv must exceed 100 µV")
        low, high = self.blink_width_ms
        if low <= 0 or high < low:
            raise ValueError("blink_width_ms must be a positive (low, high) range")
        if self.noise_sd_uv < 0:
            raise ValueError("noise_sd_uv cannot be negative")
        return self


def build_config(**fields) -> SynthConfig:
    """SynthConfig from keyword fields, raising ConfigError on bad ranges."""
    try:
        return SynthConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"Invalid synthetic configuration: {e}") from e


def raised_cosine(width: int) -> np.ndarray:
    """Pulse of `width` samples peaking at 1, zero at both ends."""
    n = np.arange(width)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (n + 0.5) / width))


def _place_blinks(cfg: SynthConfig, num_samples: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Non-overlapping (start, width) pairs in sample units."""
    fs = cfg.sample_rate_hz
    expected = cfg.blink_rate_per_min * cfg.duration_s / 60.0
    count = int(rng.poisson(expected)) if expected > 0 else 0
    gap = int(round(MIN_BLINK_GAP_MS * fs / 1000.0))
    low, high = cfg.blink_width_ms
    placed: List[Tuple[int, int]] = []
    for _ in range(count):
        width = max(3, int(round(rng.uniform(low, high) * fs / 1000.0)))
        if width >= num_samples:
            continue
        for _attempt in range(20):
            start = int(rng.integers(0, num_samples - width + 1))
            clear = all(start + width + gap <= s or s + w + gap <= start for s, w in placed)
            if clear:
                placed.append((start, width))
                break
    return sorted(placed)


def generate(cfg: SynthConfig) -> Recording:
    """Synthesize one five-channel recording with its blink labels."""
    rng = np.random.default_rng(cfg.seed)
    num_samples = int(round(cfg.duration_s * cfg.sample_rate_hz))
    if num_samples < 1:
        raise ConfigError("duration_s is shorter than one sample")

    pulse_train = np.zeros(num_samples)
    labels = np.zeros(num_samples, dtype=np.int8)
    for start, width in _place_blinks(cfg, num_samples, rng):
        pulse = raised_cosine(width)
        pulse_train[start:start + width] = pulse
        labels[start:start + width] = (pulse > LABEL_THRESHOLD * pulse.max()).astype(np.int8)

    t = np.arange(num_samples) / cfg.sample_rate_hz
    values = np.empty((len(STUDY_ELECTRODES), num_samples))
    for row, name in enumerate(STUDY_ELECTRODES):
        values[row] = SPATIAL_GAINS[name] * cfg.blink_amplitude_uv * pulse_train
    if cfg.noise_sd_uv > 0:
        values += rng.normal(0.0, cfg.noise_sd_uv, size=values.shape)
    if cfg.tremor is not None:
        values += cfg.tremor.amplitude_uv * np.sin(2.0 * np.pi * cfg.tremor.freq_hz * t)[None, :]

    recording = make_recording(
        subject_id=cfg.subject_id,
        cohort=cfg.cohort,
        sample_rate=cfg.sample_rate_hz,
        channel_names=STUDY_ELECTRODES,
        values_uv=values,
        labels=labels,
    )
    logger.debug(f"Generated {cfg.subject_id}: blink fraction {recording.blink_fraction:.4f}")
    return recording


def generate_dataset(
    n_hc: int,
    n_pd: int,
    out_dir: str,
    cfg: Optional[SynthConfig] = None,
    seed: int = 0,
) -> str:
    """
    Write `n_hc + n_pd` synthetic recordings plus manifest.json into
    `out_dir`. PD subjects get a tremor (5 Hz unless `cfg` sets one).
    Returns the manifest path.
    """
    if n_hc < 0 or n_pd < 0:
        raise ConfigError("Subject counts cannot be negative")
    base = cfg or SynthConfig()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    subjects = [(Cohort.HC, i) for i in range(n_hc)] + [(Cohort.PD, i) for i in range(n_pd)]
    for position, (cohort, index) in enumerate(subjects):
        subject_id = f"{cohort.value.lower()}{index:02d}"
        tremor = (base.tremor or Tremor()) if cohort == Cohort.PD else None
        subject_cfg = base.model_copy(
            update={
                "seed": seed * 1000 + position,
                "subject_id": subject_id,
                "cohort": cohort,
                "tremor": tremor,
            }
        )
        recording = generate(subject_cfg)
        filename = f"{subject_id}.csv"
        write_recording(os.path.join(out_dir, filename), recording)
        entries.append(
            ManifestEntry(
                subject_id=subject_id,
                cohort=cohort,
                path=filename,
                sample_rate_hz=subject_cfg.sample_rate_hz,
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest_path, entries)
    logger.info(f"Wrote {len(entries)} synthetic recordings to {out_dir}")
    return manifest_path
