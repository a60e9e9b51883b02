import numpy as np
import pytest

from src.core.errors import ConfigError, DimensionError
from src.functional import (
    conv1d,
    conv_padding,
    depthwise_conv1d,
    pointwise_conv1d,
    weighted_cross_entropy,
)
from src.layers import (
    ConvWeights,
    RecurrentCell,
    TcnBlockWeights,
    bidirectional_wrap,
    depthwise_separable_conv1d,
    rnn_cell_step,
    tcn_block,
)
from src.tensor import Tensor, concat


def _param(rng, *shape, scale=0.5):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _cell(rng, kind, c_in, units):
    rows = {"LSTM": 4, "GRU": 3}[kind] * units
    return RecurrentCell(kind, _param(rng, rows, c_in), _param(rng, rows, units), _param(rng, rows))


def test_conv_padding_rules():
    assert conv_padding(5, 1, causal=False) == (2, 2)
    assert conv_padding(3, 4, causal=True) == (8, 0)
    assert conv_padding(2, 1, causal=True) == (1, 0)
    with pytest.raises(ConfigError):
        conv_padding(4, 1, causal=False)
    with pytest.raises(ConfigError):
        conv_padding(3, 0, causal=True)


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 9))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    padded = np.pad(x, ((0, 0), (1, 1)))
    for o in range(3):
        for t in range(9):
            expected = b[o] + np.sum(w[o] * padded[:, t:t + 3])
            assert out[o, t] == pytest.approx(expected)


def test_causal_k2_example():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    w = Tensor([[[1.0, 1.0]]])
    out = conv1d(x, w, dilation=1, causal=True)
    assert np.array_equal(out.data, [[1.0, 3.0, 5.0, 7.0]])


def test_conv1d_rejects_mismatched_weight(rng):
    with pytest.raises(DimensionError):
        conv1d(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(3, 4, 3))))


@pytest.mark.parametrize("causal,dilation", [(False, 1), (True, 1), (True, 2), (False, 3)])
def test_conv_gradients(causal, dilation, rng, gradcheck):
    for _ in range(3):
        x = _param(rng, 2, 3, 10)
        w = _param(rng, 4, 3, 3)
        b = _param(rng, 4)
        dw = _param(rng, 3, 3)
        db = _param(rng, 3)
        pw = _param(rng, 4, 3)
        pb = _param(rng, 4)
        probe = Tensor(rng.normal(size=(2, 4, 10)))
        assert gradcheck(lambda: (conv1d(x, w, b, dilation, causal) * probe).sum(), [x, w, b]) < 1e-4
        assert gradcheck(
            lambda: (depthwise_separable_conv1d(x, dw, pw, db, pb, dilation, causal) * probe).sum(),
            [x, dw, db, pw, pb],
        ) < 1e-4


def test_depthwise_separable_equals_composed_standard_conv(rng):
    x = Tensor(rng.normal(size=(3, 12)))
    dw = rng.normal(size=(3, 5))
    pw = rng.normal(size=(4, 3))
    separable = depthwise_separable_conv1d(x, Tensor(dw), Tensor(pw)).data
    full = np.einsum("oc,ck->ock", pw, dw)
    standard = conv1d(x, Tensor(full)).data
    assert np.allclose(separable, standard)


def test_depthwise_is_per_channel(rng):
    x = rng.normal(size=(3, 10))
    w = rng.normal(size=(3, 3))
    out = depthwise_conv1d(Tensor(x), Tensor(w)).data
    x_changed = x.copy()
    x_changed[1] += 5.0
    changed = depthwise_conv1d(Tensor(x_changed), Tensor(w)).data
    assert np.allclose(out[[0, 2]], changed[[0, 2]])


@pytest.mark.parametrize("separable", [False, True])
def test_tcn_block_is_causal(separable, rng):
    if separable:
        conv1 = ConvWeights(
            depth_weight=_param(rng, 2, 3), depth_bias=_param(rng, 2),
            point_weight=_param(rng, 4, 2), point_bias=_param(rng, 4),
        )
        conv2 = ConvWeights(
            depth_weight=_param(rng, 4, 3), depth_bias=_param(rng, 4),
            point_weight=_param(rng, 4, 4), point_bias=_param(rng, 4),
        )
    else:
        conv1 = ConvWeights(weight=_param(rng, 4, 2, 3), bias=_param(rng, 4))
        conv2 = ConvWeights(weight=_param(rng, 4, 4, 3), bias=_param(rng, 4))
    weights = TcnBlockWeights(conv1, conv2, ConvWeights(weight=_param(rng, 4, 2), bias=_param(rng, 4)))
    x = rng.normal(size=(2, 20))
    base = tcn_block(Tensor(x), weights, dilation=2).data
    for t in range(19):
        perturbed = x.copy()
        perturbed[:, t + 1:] += rng.normal(size=(2, 19 - t))
        out = tcn_block(Tensor(perturbed), weights, dilation=2).data
        assert np.allclose(out[:, :t + 1], base[:, :t + 1], rtol=0, atol=1e-12)


def test_tcn_block_gradients(rng, gradcheck):
    x = _param(rng, 2, 12)
    conv1 = ConvWeights(weight=_param(rng, 3, 2, 3), bias=_param(rng, 3))
    conv2 = ConvWeights(weight=_param(rng, 3, 3, 3), bias=_param(rng, 3))
    projection = ConvWeights(weight=_param(rng, 3, 2), bias=_param(rng, 3))
    weights = TcnBlockWeights(conv1, conv2, projection)
    probe = Tensor(rng.normal(size=(3, 12)))
    tensors = [x, conv1.weight, conv1.bias, conv2.weight, conv2.bias, projection.weight, projection.bias]
    assert gradcheck(lambda: (tcn_block(x, weights, dilation=2) * probe).sum(), tensors) < 1e-4


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_scan_matches_step_by_step_oracle(kind, rng):
    cell = _cell(rng, kind, 3, 4)
    x = rng.normal(size=(3, 7))
    scanned = cell.run(Tensor(x)).data
    state = None
    for t in range(7):
        h, state = rnn_cell_step(cell, Tensor(x[:, t]), state)
        assert np.allclose(h.data, scanned[:, t])


def test_lstm_step_with_zero_weights_gives_zero_state(rng):
    cell = RecurrentCell("LSTM", Tensor(np.zeros((8, 3))), Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    h, (h_state, c) = rnn_cell_step(cell, Tensor(rng.normal(size=3)))
    assert np.allclose(h.data, 0.0)
    assert np.allclose(c.data, 0.0)


def test_gru_step_with_zero_update_gate_returns_candidate(rng):
    units = 2
    input_weight = rng.normal(size=(3 * units, 3))
    input_weight[units:2 * units] = 0.0
    bias = np.zeros(3 * units)
    bias[units:2 * units] = -50.0  # update gate ≈ 0
    cell = RecurrentCell("GRU", Tensor(input_weight), Tensor(np.zeros((3 * units, units))), Tensor(bias))
    x = rng.normal(size=3)
    h, _ = rnn_cell_step(cell, Tensor(x), (Tensor(np.ones((units, 1))),))
    expected = np.tanh(input_weight[2 * units:] @ x)
    assert np.allclose(h.data, expected, atol=1e-12)


def test_gru_step_with_saturated_update_gate_keeps_previous_state(rng):
    units = 3
    input_weight = rng.normal(size=(3 * units, 4))
    input_weight[units:2 * units] = 0.0
    recurrent_weight = rng.normal(size=(3 * units, units))
    recurrent_weight[units:2 * units] = 0.0
    bias = rng.normal(size=3 * units)
    bias[units:2 * units] = 50.0  # update gate ≈ 1
    cell = RecurrentCell("GRU", Tensor(input_weight), Tensor(recurrent_weight), Tensor(bias))
    h_prev = rng.normal(size=(units, 1))
    h, _ = rnn_cell_step(cell, Tensor(rng.normal(size=4)), (Tensor(h_prev),))
    assert np.allclose(h.data, h_prev[:, 0], atol=1e-12)


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_scan_gradients(kind, rng, gradcheck):
    for _ in range(3):
        cell = _cell(rng, kind, 2, 3)
        x = _param(rng, 2, 2, 6)
        probe = Tensor(rng.normal(size=(2, 3, 6)))
        tensors = [x, cell.input_weight, cell.recurrent_weight, cell.bias]
        assert gradcheck(lambda: (cell.run(x) * probe).sum(), tensors) < 1e-4


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_bidirectional_gradients_and_layout(kind, rng, gradcheck):
    forward_cell = _cell(rng, kind, 2, 3)
    backward_cell = _cell(rng, kind, 2, 3)
    x = _param(rng, 2, 5)
    out = bidirectional_wrap(forward_cell, backward_cell, x)
    assert out.shape == (6, 5)
    assert np.allclose(out.data[:3], forward_cell.run(x).data)

    probe = Tensor(rng.normal(size=(6, 5)))
    tensors = [x, forward_cell.input_weight, backward_cell.recurrent_weight, backward_cell.bias]
    assert gradcheck(lambda: (bidirectional_wrap(forward_cell, backward_cell, x) * probe).sum(), tensors) < 1e-4


def test_bidirectional_output_depends_on_future(rng):
    forward_cell = _cell(rng, "LSTM", 2, 3)
    backward_cell = _cell(rng, "LSTM", 2, 3)
    x = rng.normal(size=(2, 6))
    base = bidirectional_wrap(forward_cell, backward_cell, Tensor(x)).data
    perturbed = x.copy()
    perturbed[:, -1] += 1.0
    out = bidirectional_wrap(forward_cell, backward_cell, Tensor(perturbed)).data
    assert np.allclose(out[:3, 0], base[:3, 0], rtol=0, atol=1e-12)
    assert not np.allclose(out[3:, 0], base[3:, 0])


def test_weighted_cross_entropy_values():
    uniform = Tensor(np.zeros((2, 6)))
    labels = np.array([0, 1, 0, 1, 1, 0])
    assert weighted_cross_entropy(uniform, labels, (1.0, 1.0)).item() == pytest.approx(np.log(2))

    confident = np.where(np.stack([labels == 0, labels == 1]), 40.0, -40.0)
    assert weighted_cross_entropy(Tensor(confident), labels, (1.0, 1.0)).item() == pytest.approx(0.0, abs=1e-12)


def test_weighted_cross_entropy_gradient(rng, gradcheck):
    logits = _param(rng, 3, 2, 7, scale=1.0)
    labels = rng.integers(0, 2, size=(3, 7))
    assert gradcheck(lambda: weighted_cross_entropy(logits, labels, (0.7, 2.5)), [logits]) < 1e-5


def test_class_weight_scaling_scales_loss_and_keeps_direction(rng):
    logits = _param(rng, 2, 9, scale=1.0)
    labels = rng.integers(0, 2, size=9)
    base = weighted_cross_entropy(logits, labels, (1.0, 3.0))
    base.backward()
    g1 = logits.grad.copy()
    logits.zero_grad()
    scaled = weighted_cross_entropy(logits, labels, (4.0, 12.0))
    scaled.backward()
    g2 = logits.grad.copy()
    assert scaled.item() == pytest.approx(4.0 * base.item())
    cosine = np.sum(g1 * g2) / (np.linalg.norm(g1) * np.linalg.norm(g2))
    assert cosine == pytest.approx(1.0, abs=1e-12)


def test_pointwise_and_concat_shapes(rng):
    x = Tensor(rng.normal(size=(4, 3, 5)))
    out = pointwise_conv1d(x, Tensor(rng.normal(size=(2, 3))))
    assert out.shape == (4, 2, 5)
    assert concat([out, out], axis=-2).shape == (4, 4, 5)


@pytest.mark.slow
def test_gradients_over_many_random_cases(rng, gradcheck):
    for _ in range(100):
        x = _param(rng, 2, 7)
        probe = Tensor(rng.normal(size=(3, 7)))
        w = _param(rng, 3, 2, 3)
        b = _param(rng, 3)
        dw, db, pw, pb = _param(rng, 2, 3), _param(rng, 2), _param(rng, 3, 2), _param(rng, 3)
        dilation = int(rng.integers(1, 3))
        assert gradcheck(lambda: (conv1d(x, w, b, dilation, causal=True) * probe).sum(), [x, w, b]) < 1e-4
        assert gradcheck(
            lambda: (depthwise_separable_conv1d(x, dw, pw, db, pb, dilation, causal=False) * probe).sum(),
            [x, dw, db, pw, pb],
        ) < 1e-4
        for kind in ("LSTM", "GRU"):
            forward_cell, backward_cell = _cell(rng, kind, 2, 2), _cell(rng, kind, 2, 2)
            rnn_probe = Tensor(rng.normal(size=(4, 7)))
            tensors = [x, forward_cell.input_weight, forward_cell.recurrent_weight, backward_cell.bias]
            assert gradcheck(
                lambda: (bidirectional_wrap(forward_cell, backward_cell, x) * rnn_probe).sum(), tensors
            ) < 1e-4
        head = _param(rng, 2, 2)
        labels = rng.integers(0, 2, size=7)
        assert gradcheck(
            lambda: weighted_cross_entropy(pointwise_conv1d(x, head), labels, (1.0, 2.0)), [x, head]
        ) < 1e-4
