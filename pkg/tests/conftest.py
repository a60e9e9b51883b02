from typing import Callable, Sequence

import numpy as np
import pytest

from src.architectures import HyperParams, ModelKind, SequenceModel, assemble
from src.recordings import Cohort, make_recording
from src.synthgen import SynthConfig, generate, generate_dataset
from src.tensor import Tensor


def gradient_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6) -> float:
    """
    Largest relative error between backward() gradients and central finite
    differences over every entry of `tensors`.
    """
    for tensor in tensors:
        tensor.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for tensor in tensors:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn().item()
            flat[i] = original - eps
            minus = loss_fn().item()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


@pytest.fixture
def gradcheck():
    return gradient_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noiseless_recording():
    cfg = SynthConfig(duration_s=8.0, blink_rate_per_min=30.0, noise_sd_uv=0.0, seed=3)
    return generate(cfg)


@pytest.fixture
def tiny_recording():
    values = np.vstack([np.arange(16, dtype=float) * (row + 1) for row in range(5)])
    labels = np.array([0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0])
    return make_recording(
        subject_id="tiny",
        cohort=Cohort.PD,
        sample_rate=512,
        channel_names=("Fp1", "Fp2", "Fz", "F3", "F4"),
        values_uv=values,
        labels=labels,
    )


@pytest.fixture
def synthetic_manifest(tmp_path):
    cfg = SynthConfig(duration_s=4.0, blink_rate_per_min=30.0, noise_sd_uv=2.0)
    return generate_dataset(4, 4, str(tmp_path / "data"), cfg, seed=7)


@pytest.fixture
def threshold_model():
    """Single-channel model that labels a sample as blink iff its value is positive."""
    hp = HyperParams(model_kind=ModelKind.CNN_ST, num_channels=1, filter_size=1, num_blocks=1, num_filters=1)
    weights = {
        "0.weight": np.ones((1, 1, 1)),
        "0.bias": np.zeros(1),
        "1.weight": np.array([[0.0], [1.0]]),
        "1.bias": np.zeros(2),
    }
    return SequenceModel(assemble(hp), weights)
