"""
Self-describing checkpoint container.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then every
weight array as little-endian float64 in header order.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from pydantic import ValidationError

from src.architectures import HyperParams, SequenceModel, assemble, weight_shapes
from src.core.errors import BlinkSegmentationError, CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_FIELDS = ("format_version", "hyperparams", "weights", "normalization", "train_config_digest")
# Mean and sd are not stored: each input recording is z-scored with its own statistics.
DEFAULT_NORMALIZATION = {
    "method": "per_channel_zscore",
    "scope": "recording",
    "statistics": "per_input_recording",
}


@dataclass
class Checkpoint:
    hyperparams: HyperParams
    weights: Dict[str, np.ndarray]
    normalization: Dict[str, object] = field(default_factory=lambda: dict(DEFAULT_NORMALIZATION))
    train_config_digest: str = ""
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(
        cls,
        model: SequenceModel,
        train_config_digest: str = "",
        normalization: Optional[Dict[str, object]] = None,
    ) -> "Checkpoint":
        return cls(
            hyperparams=model.hyperparams,
            weights=model.state_dict(),
            normalization=dict(normalization or DEFAULT_NORMALIZATION),
            train_config_digest=train_config_digest,
        )

    def to_model(self, requires_grad: bool = False) -> SequenceModel:
        return SequenceModel(assemble(self.hyperparams), self.weights, requires_grad=requires_grad)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    spec = assemble(checkpoint.hyperparams)
    order = weight_shapes(spec)
    header = {
        "format_version": checkpoint.format_version,
        "hyperparams": checkpoint.hyperparams.model_dump(mode="json"),
        "weights": [{"name": name, "shape": list(shape)} for name, shape in order],
        "normalization": checkpoint.normalization,
        "train_config_digest": checkpoint.train_config_digest,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(np.array([len(encoded)], dtype="<u8").tobytes())
        handle.write(encoded)
        for name, shape in order:
            array = np.asarray(checkpoint.weights[name], dtype="<f8")
            if array.shape != shape:
                raise CheckpointError(f"Weight has shape {array.shape}, expected {shape}", field=name)
            handle.write(array.tobytes(order="C"))
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path} ({checkpoint.hyperparams.model_kind.value})")


def _read_header(blob: bytes) -> dict:
    if len(blob) < 8:
        raise CheckpointError("File is truncated before the header length", field="header")
    length = int(np.frombuffer(blob[:8], dtype="<u8")[0])
    if len(blob) < 8 + length:
        raise CheckpointError("File is truncated inside the header", field="header")
    try:
        header = json.loads(blob[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Header is not valid JSON: {e}", field="header") from e
    if not isinstance(header, dict):
        raise CheckpointError("Header must be a JSON object", field="header")
    unknown = sorted(set(header) - set(HEADER_FIELDS))
    if unknown:
        raise CheckpointError(f"Unknown header field '{unknown[0]}'", field=unknown[0])
    missing = [name for name in HEADER_FIELDS if name not in header]
    if missing:
        raise CheckpointError(f"Missing header field '{missing[0]}'", field=missing[0])
    return header


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    header = _read_header(blob)
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Format version {header['format_version']} is not supported (expected {FORMAT_VERSION})",
            field="format_version",
        )
    raw_hyperparams = header["hyperparams"]
    if not isinstance(raw_hyperparams, dict):
        raise CheckpointError("Hyperparameters must be a JSON object", field="hyperparams")
    unknown = sorted(set(raw_hyperparams) - set(HyperParams.model_fields))
    if unknown:
        raise CheckpointError(f"Unknown hyperparameter '{unknown[0]}'", field=f"hyperparams.{unknown[0]}")
    try:
        hyperparams = HyperParams(**raw_hyperparams)
        spec = assemble(hyperparams)
    except (ValidationError, TypeError, BlinkSegmentationError) as e:
        raise CheckpointError(f"Invalid hyperparameters: {e}", field="hyperparams") from e

    expected = weight_shapes(spec)
    stored = header["weights"]
    if [entry.get("name") for entry in stored] != [name for name, _ in expected]:
        raise CheckpointError("Weight names do not match the architecture", field="weights")

    offset = 8 + int(np.frombuffer(blob[:8], dtype="<u8")[0])
    weights: Dict[str, np.ndarray] = {}
    for entry, (name, shape) in zip(stored, expected):
        if tuple(entry.get("shape", ())) != shape:
            raise CheckpointError(f"Stored shape {entry.get('shape')} differs from {list(shape)}", field=name)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointError("File is truncated inside the weight data", field=name)
        weights[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the weight data", field="weights")

    logger.info(f"Loaded checkpoint {path} ({hyperparams.model_kind.value})")
    return Checkpoint(
        hyperparams=hyperparams,
        weights=weights,
        normalization=header["normalization"],
        train_config_digest=header["train_config_digest"],
        format_version=header["format_version"],
    )
