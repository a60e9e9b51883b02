import json

import numpy as np
import pytest

from src.architectures import CONV_KINDS, RNN_KINDS, HyperParams, ModelKind, SequenceModel, assemble
from src.checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from src.core.config import Settings
from src.core.errors import CheckpointError, ConfigError, ContractError, DivergenceError, NumericalError
from src.recordings import ChannelConfig, load_dataset, make_windows
from src.trainer import (
    AdamOptimizer,
    TrainConfig,
    build_train_config,
    class_weights,
    loss,
    train,
)

SMALL = HyperParams(
    model_kind=ModelKind.CNN_RNN_ST,
    num_channels=1,
    filter_size=5,
    num_blocks=1,
    num_filters=4,
    num_rnn_blocks=1,
    num_units=4,
)


def _windows(rng, n=4, length=24):
    inputs = rng.normal(size=(n, 1, length))
    labels = (inputs[:, 0, :] > 0.5).astype(np.int8)
    return inputs, labels


def test_class_weights_are_inverse_frequencies():
    assert class_weights(np.array([0, 0, 0, 1])) == pytest.approx((4 / 3, 4.0))
    assert class_weights(np.zeros(5)) == (1.0, 1.0)
    assert class_weights(np.ones(5)) == (1.0, 1.0)


def test_train_config_validation_and_settings_overrides():
    with pytest.raises(ConfigError):
        build_train_config(batch_size=0)
    with pytest.raises(ConfigError):
        build_train_config(dropout_rate=1.0)
    cfg = TrainConfig.from_settings(Settings(), epochs=3, learning_rate=None)
    assert cfg.epochs == 3
    assert cfg.learning_rate == Settings().LEARNING_RATE
    assert cfg.digest() == TrainConfig.from_settings(Settings(), epochs=3).digest()
    assert cfg.digest() != TrainConfig.from_settings(Settings(), epochs=4).digest()


def test_zero_epochs_returns_initial_weights(rng):
    cfg = build_train_config(epochs=0, seed=5)
    result = train(SMALL, _windows(rng), cfg)
    initial = SequenceModel.initialize(assemble(SMALL), seed=5).state_dict()
    assert result.best_epoch == 0
    assert result.history == []
    assert all(np.array_equal(result.checkpoint.weights[name], initial[name]) for name in initial)
    assert result.checkpoint.train_config_digest == cfg.digest()


def test_training_is_deterministic(rng):
    windows = _windows(rng)
    cfg = build_train_config(epochs=2, batch_size=2, seed=3)
    a = train(SMALL, windows, cfg)
    b = train(SMALL, windows, cfg)
    assert all(np.array_equal(a.checkpoint.weights[k], b.checkpoint.weights[k]) for k in a.checkpoint.weights)
    assert [r.loss for r in a.history] == [r.loss for r in b.history]


@pytest.mark.parametrize("seed", range(20))
def test_small_adam_step_lowers_the_loss(seed):
    case_rng = np.random.default_rng(seed)
    inputs, labels = _windows(case_rng, n=1)
    model = SequenceModel.initialize(assemble(SMALL), seed=seed)
    weights = class_weights(labels)
    optimizer = AdamOptimizer(model.parameters(), lr=1e-4)
    before = loss(model(inputs), labels, weights)
    before.backward()
    optimizer.step()
    after = loss(model(inputs), labels, weights)
    assert after.item() < before.item()


def test_training_fits_a_separable_toy_problem(rng):
    windows = _windows(rng, n=8)
    hp = HyperParams(model_kind=ModelKind.CNN_ST, num_channels=1, filter_size=5, num_blocks=1, num_filters=4)
    result = train(hp, windows, build_train_config(epochs=30, batch_size=4, learning_rate=0.03, dropout_rate=0.0))
    assert result.history[-1].loss < result.history[0].loss


def test_early_stopping_keeps_the_best_search_epoch(rng):
    train_windows = _windows(rng)
    search_windows = _windows(rng, n=2)
    cfg = build_train_config(epochs=6, batch_size=4, patience=2)
    result = train(SMALL, train_windows, cfg, search_windows)
    scores = [r.search_f1_micro for r in result.history]
    assert all(score is not None for score in scores)
    assert result.best_epoch == 1 + int(np.argmax(scores))
    assert len(result.history) <= 6


def test_train_rejects_bad_windows(rng):
    inputs, labels = _windows(rng)
    with pytest.raises(ContractError):
        train(SMALL, (inputs, labels[:, :-1]), build_train_config(epochs=1))
    with pytest.raises(ContractError):
        train(SMALL.model_copy(update={"num_channels": 3}), (inputs, labels), build_train_config(epochs=1))


def test_non_finite_loss_reports_divergence(rng, monkeypatch):
    def exploding(logits, labels, weights):
        raise NumericalError("loss is NaN")

    monkeypatch.setattr("src.trainer.loss", exploding)
    with pytest.raises(DivergenceError) as info:
        train(SMALL, _windows(rng), build_train_config(epochs=3))
    assert info.value.epoch == 1


def test_windows_from_synthetic_recordings_train(synthetic_manifest):
    recordings = load_dataset(synthetic_manifest)
    windows = make_windows(recordings[:2], ChannelConfig.for_count(1), window_len=256)
    result = train(SMALL, windows, build_train_config(epochs=1, batch_size=8))
    assert len(result.history) == 1


def _saved(tmp_path, rng):
    result = train(SMALL, _windows(rng), build_train_config(epochs=1, batch_size=4))
    path = tmp_path / "model.ckpt"
    save_checkpoint(result.checkpoint, str(path))
    return result.checkpoint, path


def _rewrite_header(path, mutate):
    blob = path.read_bytes()
    length = int(np.frombuffer(blob[:8], dtype="<u8")[0])
    header = json.loads(blob[8:8 + length])
    mutate(header)
    encoded = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(np.array([len(encoded)], dtype="<u8").tobytes() + encoded + blob[8 + length:])


def test_checkpoint_round_trip_reproduces_outputs(tmp_path, rng):
    checkpoint, path = _saved(tmp_path, rng)
    loaded = load_checkpoint(str(path))
    assert loaded.hyperparams == checkpoint.hyperparams
    assert loaded.format_version == FORMAT_VERSION
    assert loaded.train_config_digest == checkpoint.train_config_digest
    x = rng.normal(size=(1, 40))
    assert np.array_equal(loaded.to_model()(x).data, checkpoint.to_model()(x).data)
    assert not (tmp_path / "model.ckpt.tmp").exists()


def test_checkpoint_header_is_sorted_json(tmp_path, rng):
    _, path = _saved(tmp_path, rng)
    blob = path.read_bytes()
    length = int(np.frombuffer(blob[:8], dtype="<u8")[0])
    header = json.loads(blob[8:8 + length])
    assert list(header) == sorted(header)
    assert header["normalization"]["method"] == "per_channel_zscore"
    assert header["normalization"]["statistics"] == "per_input_recording"


def test_truncated_checkpoint_names_the_weight(tmp_path, rng):
    checkpoint, path = _saved(tmp_path, rng)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    last_weight = list(checkpoint.weights)[-1]
    assert info.value.field == last_weight


def test_unknown_header_field_is_rejected(tmp_path, rng):
    _, path = _saved(tmp_path, rng)
    _rewrite_header(path, lambda header: header.update({"optimizer": "adam"}))
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert info.value.field == "optimizer"


def test_unknown_hyperparameter_is_rejected(tmp_path, rng):
    _, path = _saved(tmp_path, rng)
    _rewrite_header(path, lambda header: header["hyperparams"].update({"attention_heads": 4}))
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert info.value.field == "hyperparams.attention_heads"


def test_unsupported_version_is_rejected(tmp_path, rng):
    _, path = _saved(tmp_path, rng)
    _rewrite_header(path, lambda header: header.update({"format_version": 2}))
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert info.value.field == "format_version"


def test_shape_mismatch_names_the_weight(tmp_path, rng):
    _, path = _saved(tmp_path, rng)

    def widen(header):
        header["weights"][0]["shape"] = [5, 1, 5]

    _rewrite_header(path, widen)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert info.value.field == "0.weight"


def test_checkpoint_from_model_keeps_hyperparams(tmp_path):
    model = SequenceModel.initialize(assemble(SMALL), seed=1)
    path = tmp_path / "nested" / "m.ckpt"
    save_checkpoint(Checkpoint.from_model(model, train_config_digest="abc"), str(path))
    loaded = load_checkpoint(str(path))
    assert loaded.train_config_digest == "abc"
    assert loaded.hyperparams == SMALL


def _family_hp(kind):
    fields = {"model_kind": kind, "num_channels": 3}
    if kind in CONV_KINDS:
        fields.update(filter_size=3, num_blocks=2, num_filters=4)
    if kind in RNN_KINDS:
        fields.update(num_rnn_blocks=1, num_units=3)
    return HyperParams(**fields)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_checkpoint_round_trip_for_every_family(kind, tmp_path, rng):
    model = SequenceModel.initialize(assemble(_family_hp(kind)), seed=4)
    path = tmp_path / f"{kind.value}.ckpt"
    save_checkpoint(Checkpoint.from_model(model), str(path))
    x = rng.normal(size=(3, 20))
    assert np.array_equal(load_checkpoint(str(path)).to_model()(x).data, model.frozen()(x).data)
