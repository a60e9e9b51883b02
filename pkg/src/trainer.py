"""
Training loop: weighted cross-entropy, Adam updates and early stopping on
search-set F1-micro.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from src.architectures import HyperParams, SequenceModel, assemble
from src.checkpoint import Checkpoint
from src.core.config import Settings
from src.core.errors import ConfigError, ContractError, DivergenceError, NumericalError
from src.core.timing import measure_time
from src.functional import weighted_cross_entropy
from src.metrics import f1_micro
from src.tensor import Tensor

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    # (no-blink, blink); None means inverse class frequency of the training windows
    class_weights: Optional[Tuple[float, float]] = None
    dropout_rate: float = 0.2
    seed: int = 0
    patience: int = 10

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError("epochs cannot be negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        return self

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "TrainConfig":
        fields = {
            "epochs": settings.EPOCHS,
            "batch_size": settings.BATCH_SIZE,
            "learning_rate": settings.LEARNING_RATE,
            "dropout_rate": settings.DROPOUT_RATE,
            "seed": settings.SEED,
            "patience": settings.PATIENCE,
        }
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return build_train_config(**fields)

    def digest(self) -> str:
        return hashlib.md5(self.model_dump_json().encode()).hexdigest()


def build_train_config(**fields) -> TrainConfig:
    try:
        return TrainConfig(**fields)
    except ValidationError as e:
        raise ConfigError(f"Invalid training configuration: {e}") from e


def class_weights(labels: np.ndarray) -> Tuple[float, float]:
    """Inverse class frequency (no-blink, blink); an absent class gets weight 1."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        return 1.0, 1.0
    blink = float(np.mean(labels == 1))
    no_blink = 1.0 - blink
    return (1.0 / no_blink if no_blink > 0 else 1.0), (1.0 / blink if blink > 0 else 1.0)


def loss(logits: Tensor, labels, weights: Sequence[float]) -> Tensor:
    """Mean over timesteps of class-weighted cross-entropy."""
    return weighted_cross_entropy(logits, labels, weights)


class AdamOptimizer:
    """
    Adaptive-moment updates over a fixed list of parameter tensors.

    Both moment estimates start at zero, so step t divides them by
    (1 - beta**t) before the update. Parameters without a gradient
    (not reached by the last backward pass) are left untouched.
    """

    def __init__(
        self,
        parameters: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first_moment = [np.zeros_like(param.data) for param in self.parameters]
        self.second_moment = [np.zeros_like(param.data) for param in self.parameters]
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        first_correction = 1.0 - self.beta1**self.steps
        second_correction = 1.0 - self.beta2**self.steps
        for index, param in enumerate(self.parameters):
            if param.grad is None:
                continue
            grad = param.grad
            self.first_moment[index] = self.beta1 * self.first_moment[index] + (1.0 - self.beta1) * grad
            self.second_moment[index] = self.beta2 * self.second_moment[index] + (1.0 - self.beta2) * grad**2
            m_hat = self.first_moment[index] / first_correction
            v_hat = self.second_moment[index] / second_correction
            param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.grad = None


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    search_f1_micro: Optional[float] = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def history_rows(self) -> List[Dict[str, object]]:
        return [record.model_dump() for record in self.history]


def _search_score(model: SequenceModel, search: Optional[Tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
    if search is None or len(search[0]) == 0:
        return None
    inputs, targets = search
    predictions = model.frozen().predict(inputs)
    return f1_micro(predictions, targets)


@measure_time
def train(
    hp: HyperParams,
    train_windows: Tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    search_windows: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> TrainResult:
    """
    Train one configuration on windows ([N×C×L] inputs, [N×L] labels).

    Without search windows the final epoch is kept; with them the epoch with
    the best search F1-micro wins and training stops after `patience`
    epochs without improvement.
    """
    inputs, targets = train_windows
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets)
    if inputs.ndim != 3 or len(inputs) == 0:
        raise ContractError("train() needs at least one [C×L] training window")
    if targets.shape != (inputs.shape[0], inputs.shape[2]):
        raise ContractError(f"Labels {targets.shape} do not fit inputs {inputs.shape}")

    spec = assemble(hp)
    if inputs.shape[1] != spec.in_width:
        raise ContractError(f"{hp.model_kind.value} takes {spec.in_width} channels, windows have {inputs.shape[1]}")
    model = SequenceModel.initialize(spec, cfg.seed)
    weights = cfg.class_weights or class_weights(targets)
    optimizer = AdamOptimizer(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    digest = cfg.digest()

    history: List[EpochRecord] = []
    best_state = model.state_dict()
    best_score = -1.0
    best_epoch = 0
    stale = 0
    logger.info(
        f"Training {hp.model_kind.value} [{hp.key()}] on {len(inputs)} windows, "
        f"class weights ({weights[0]:.3f}, {weights[1]:.3f})"
    )

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(inputs))
        total = 0.0
        for first in range(0, len(order), cfg.batch_size):
            batch = order[first:first + cfg.batch_size]
            optimizer.zero_grad()
            try:
                logits = model.forward(inputs[batch], training=True, dropout_rate=cfg.dropout_rate, rng=rng)
                step_loss = loss(logits, targets[batch], weights)
            except NumericalError as e:
                raise DivergenceError(epoch, f"Loss diverged at epoch {epoch}: {e}") from e
            step_loss.backward()
            optimizer.step()
            total += step_loss.item() * len(batch)
        epoch_loss = total / len(inputs)
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch)

        score = _search_score(model, search_windows)
        history.append(EpochRecord(epoch=epoch, loss=epoch_loss, search_f1_micro=score))
        logger.debug(f"epoch {epoch}: loss {epoch_loss:.5f}, search f1 {score}")

        if score is None:
            best_state, best_epoch = model.state_dict(), epoch
            continue
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Early stopping at epoch {epoch}, best epoch {best_epoch}")
                break

    checkpoint = Checkpoint(hyperparams=hp, weights=best_state, train_config_digest=digest)
    return TrainResult(checkpoint=checkpoint, history=history, best_epoch=best_epoch)
