import numpy as np
import pytest

from src.architectures import (
    STANDARD_COUNTERPART,
    HyperParams,
    ModelKind,
    RnnCellKind,
    SequenceModel,
    assemble,
    display_name,
    multiply_count,
    parameter_count,
    receptive_field,
    resolve_model_kind,
    weight_shapes,
)
from src.core.errors import ConfigError
from src.search import default_grid, enumerate_grid

WINNER = HyperParams(
    model_kind=ModelKind.CNN_RNN_ST,
    num_channels=5,
    filter_size=15,
    num_blocks=2,
    num_filters=32,
    num_rnn_blocks=2,
    num_units=32,
)


def _hp(kind, **fields):
    fields.setdefault("num_channels", 3)
    return HyperParams(model_kind=kind, **fields)


def test_winner_configuration_assembles():
    spec = assemble(WINNER)
    kinds = [layer.kind for layer in spec.layers]
    assert kinds == ["conv", "conv", "rnn", "rnn", "linear"]
    assert spec.layers[2].direction == "bidirectional"
    assert spec.layers[-1].out_width == 2
    assert parameter_count(spec) > 0


def test_pure_lstm_stack_has_no_conv_stage():
    spec = assemble(_hp(ModelKind.LSTM, num_rnn_blocks=4, num_units=16))
    assert [layer.kind for layer in spec.layers] == ["rnn"] * 4 + ["linear"]
    assert spec.conv_width is None
    assert all(layer.direction == "forward" for layer in spec.layers[:4])


def test_not_applicable_field_is_rejected():
    with pytest.raises(ConfigError):
        assemble(_hp(ModelKind.GRU, filter_size=5, num_rnn_blocks=1, num_units=8))
    with pytest.raises(ConfigError):
        assemble(_hp(ModelKind.CNN_ST, filter_size=5, num_blocks=1))
    with pytest.raises(ConfigError):
        assemble(_hp(ModelKind.CNN_ST, filter_size=5, num_blocks=1, num_filters=8, num_channels=4))


def test_aliases_and_display_names():
    assert resolve_model_kind("CNN-RNN") is ModelKind.CNN_RNN_ST
    assert resolve_model_kind("TCN-RNN") is ModelKind.TCN_RNN_DW
    assert resolve_model_kind("BiLSTM") is ModelKind.BILSTM
    assert display_name(ModelKind.CNN_RNN_ST) == "CNN-RNN"
    assert display_name(ModelKind.TCN_ST) == "TCN-ST"
    with pytest.raises(ConfigError):
        resolve_model_kind("Transformer")


def test_hyperparams_key_is_stable_and_distinct():
    assert WINNER.key() == WINNER.model_copy().key()
    other = WINNER.model_copy(update={"num_units": 16})
    assert WINNER.key() != other.key()


def test_hybrid_cell_is_configurable():
    gru_hybrid = WINNER.model_copy(update={"rnn_cell": RnnCellKind.GRU})
    spec = assemble(gru_hybrid)
    assert spec.layers[2].cell == "GRU"
    assert spec.layers[2].direction == "forward"


@pytest.mark.parametrize(
    "hp",
    [
        _hp(ModelKind.CNN_DW, filter_size=15, num_blocks=4, num_filters=32),
        _hp(ModelKind.CNN_DW, filter_size=5, num_blocks=1, num_filters=8, num_channels=1),
        _hp(ModelKind.TCN_DW, filter_size=11, num_blocks=3, num_filters=16),
        _hp(ModelKind.CNN_RNN_DW, filter_size=15, num_blocks=2, num_filters=32, num_rnn_blocks=2, num_units=32),
        _hp(ModelKind.TCN_RNN_DW, filter_size=5, num_blocks=3, num_filters=32, num_rnn_blocks=1, num_units=32),
    ],
)
def test_depthwise_parity_with_standard_counterpart(hp):
    dw = assemble(hp)
    st = assemble(hp.model_copy(update={"model_kind": STANDARD_COUNTERPART[hp.model_kind]}))
    assert abs(parameter_count(dw) - parameter_count(st)) <= 0.1 * parameter_count(st)
    assert multiply_count(dw) < multiply_count(st)


@pytest.mark.slow
def test_depthwise_parity_over_whole_grid():
    for hp in enumerate_grid(default_grid()):
        if hp.model_kind not in STANDARD_COUNTERPART:
            continue
        dw = assemble(hp)
        st = assemble(hp.model_copy(update={"model_kind": STANDARD_COUNTERPART[hp.model_kind]}))
        assert abs(parameter_count(dw) - parameter_count(st)) <= 0.1 * parameter_count(st)
        assert multiply_count(dw) < multiply_count(st)


def test_parameter_count_by_hand():
    # conv 1->8 (K=5): 40 + 8; head 8->2: 16 + 2
    spec = assemble(_hp(ModelKind.CNN_ST, filter_size=5, num_blocks=1, num_filters=8, num_channels=1))
    assert parameter_count(spec) == 66
    names = [name for name, _ in weight_shapes(spec)]
    assert names == ["0.weight", "0.bias", "1.weight", "1.bias"]


@pytest.mark.parametrize("blocks,kernel", [(1, 5), (3, 11), (4, 15)])
def test_tcn_receptive_field(blocks, kernel):
    spec = assemble(_hp(ModelKind.TCN_ST, filter_size=kernel, num_blocks=blocks, num_filters=8))
    assert receptive_field(spec) == 1 + 2 * (kernel - 1) * (2 ** blocks - 1)
    assert receptive_field(assemble(WINNER)) is None


@pytest.mark.parametrize("kind", [ModelKind.TCN_ST, ModelKind.TCN_DW])
def test_tcn_models_never_look_ahead(kind, rng):
    hp = _hp(kind, filter_size=5, num_blocks=2, num_filters=8)
    model = SequenceModel.initialize(assemble(hp), seed=0).frozen()
    x = rng.normal(size=(3, 40))
    base = model(x).data
    for t in (0, 10, 25, 38):
        perturbed = x.copy()
        perturbed[:, t + 1:] += 3.0
        out = model(perturbed).data
        assert np.allclose(out[:, :t + 1], base[:, :t + 1], rtol=0, atol=1e-12)


def test_bidirectional_model_sees_the_future(rng):
    hp = _hp(ModelKind.BILSTM, num_rnn_blocks=1, num_units=4)
    model = SequenceModel.initialize(assemble(hp), seed=0).frozen()
    x = rng.normal(size=(3, 12))
    perturbed = x.copy()
    perturbed[:, -1] += 3.0
    assert not np.allclose(model(x).data[:, 0], model(perturbed).data[:, 0])


def test_forward_shapes_single_and_batched(rng):
    model = SequenceModel.initialize(assemble(WINNER), seed=1)
    assert model(rng.normal(size=(5, 16))).shape == (2, 16)
    assert model(rng.normal(size=(3, 5, 16))).shape == (3, 2, 16)


def test_zero_weights_predict_no_blink(rng):
    spec = assemble(_hp(ModelKind.CNN_ST, filter_size=5, num_blocks=2, num_filters=8))
    zeros = {name: np.zeros(shape) for name, shape in weight_shapes(spec)}
    model = SequenceModel(spec, zeros)
    assert not model.predict(rng.normal(size=(3, 20))).any()


def test_mismatched_weights_are_rejected():
    spec = assemble(_hp(ModelKind.CNN_ST, filter_size=5, num_blocks=1, num_filters=8))
    weights = {name: np.zeros(shape) for name, shape in weight_shapes(spec)}
    weights["0.weight"] = np.zeros((8, 3, 3))
    with pytest.raises(ConfigError):
        SequenceModel(spec, weights)
    del weights["0.weight"]
    with pytest.raises(ConfigError):
        SequenceModel(spec, weights)


def test_initialization_is_deterministic_per_seed():
    spec = assemble(WINNER)
    a = SequenceModel.initialize(spec, seed=5).state_dict()
    b = SequenceModel.initialize(spec, seed=5).state_dict()
    c = SequenceModel.initialize(spec, seed=6).state_dict()
    assert all(np.array_equal(a[name], b[name]) for name in a)
    assert not all(np.array_equal(a[name], c[name]) for name in a)


def test_dropout_without_rng_is_seeded(rng):
    spec = assemble(
        _hp(ModelKind.CNN_RNN_ST, filter_size=3, num_blocks=1, num_filters=4, num_rnn_blocks=1, num_units=3)
    )
    x = rng.normal(size=(3, 12))
    a = SequenceModel.initialize(spec, seed=4).forward(x, training=True, dropout_rate=0.5)
    b = SequenceModel.initialize(spec, seed=4).forward(x, training=True, dropout_rate=0.5)
    plain = SequenceModel.initialize(spec, seed=4).forward(x)
    assert np.array_equal(a.data, b.data)
    assert not np.allclose(a.data, plain.data)


def test_model_gradients_reach_every_parameter(rng):
    model = SequenceModel.initialize(assemble(WINNER), seed=2)
    logits = model(rng.normal(size=(5, 10)))
    (logits * logits).sum().backward()
    assert all(p.grad is not None for p in model.parameters())


def test_grid_sizes_match_published_table():
    grid = enumerate_grid(default_grid())
    counts = {}
    for hp in grid:
        counts[hp.model_kind] = counts.get(hp.model_kind, 0) + 1
    assert counts[ModelKind.CNN_DW] == 108
    assert counts[ModelKind.CNN_RNN_ST] == 324
    assert counts[ModelKind.LSTM] == 36
    assert ModelKind.BIGRU not in counts
