"""
Building blocks of the segmentation models: depthwise-separable convolution,
LSTM/GRU cells, the bidirectional wrapper and the TCN residual block.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.core.errors import ConfigError, DimensionError
from src.functional import (
    conv1d,
    depthwise_conv1d,
    gru_scan,
    lstm_scan,
    pointwise_conv1d,
)
from src.tensor import Tensor, as_tensor, concat, flip, relu, reshape, sigmoid, tanh

GATES = {"LSTM": 4, "GRU": 3}


def depthwise_separable_conv1d(
    x: Tensor,
    depth_kernel: Tensor,
    point_kernel: Tensor,
    depth_bias: Optional[Tensor] = None,
    point_bias: Optional[Tensor] = None,
    dilation: int = 1,
    causal: bool = False,
) -> Tensor:
    """Per-channel K-tap convolution [C_in×K] followed by 1×1 mixing [C_out×C_in]."""
    depth = depthwise_conv1d(x, depth_kernel, depth_bias, dilation=dilation, causal=causal)
    return pointwise_conv1d(depth, point_kernel, point_bias)


@dataclass(frozen=True)
class ConvWeights:
    """Weights of one convolution, standard or depthwise-separable."""
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    depth_weight: Optional[Tensor] = None
    depth_bias: Optional[Tensor] = None
    point_weight: Optional[Tensor] = None
    point_bias: Optional[Tensor] = None

    @property
    def separable(self) -> bool:
        return self.depth_weight is not None

    def apply(self, x: Tensor, dilation: int = 1, causal: bool = False) -> Tensor:
        if self.separable:
            return depthwise_separable_conv1d(
                x,
                self.depth_weight,
                self.point_weight,
                self.depth_bias,
                self.point_bias,
                dilation=dilation,
                causal=causal,
            )
        return conv1d(x, self.weight, self.bias, dilation=dilation, causal=causal)


class RecurrentCell:
    """
    One direction of an LSTM or GRU layer.

    input_weight [G·U×C], recurrent_weight [G·U×U], bias [G·U] with G = 4
    (LSTM: input, forget, candidate, output) or 3 (GRU: reset, update,
    candidate).
    """

    def __init__(self, kind: str, input_weight: Tensor, recurrent_weight: Tensor, bias: Tensor):
        if kind not in GATES:
            raise ConfigError(f"Unknown recurrent cell '{kind}'")
        units = recurrent_weight.shape[1]
        rows = GATES[kind] * units
        if recurrent_weight.shape != (rows, units) or input_weight.shape[0] != rows:
            raise DimensionError(
                f"{kind} weights {input_weight.shape}/{recurrent_weight.shape} are inconsistent"
            )
        if bias.shape != (rows,):
            raise DimensionError(f"{kind} bias {bias.shape} should be ({rows},)")
        self.kind = kind
        self.input_weight = input_weight
        self.recurrent_weight = recurrent_weight
        self.bias = bias
        self.units = units

    def initial_state(self) -> Tuple[Tensor, ...]:
        zeros = Tensor(np.zeros((self.units, 1)))
        if self.kind == "LSTM":
            return zeros, Tensor(np.zeros((self.units, 1)))
        return (zeros,)

    def project(self, x: Tensor) -> Tensor:
        return pointwise_conv1d(x, self.input_weight, self.bias)

    def run(self, x: Tensor) -> Tensor:
        """Hidden states for a whole sequence [C×T] → [U×T] (or batched)."""
        projected = self.project(x)
        if self.kind == "LSTM":
            return lstm_scan(projected, self.recurrent_weight)
        return gru_scan(projected, self.recurrent_weight)


def rnn_cell_step(
    cell: RecurrentCell, x_t: Tensor, state: Optional[Tuple[Tensor, ...]] = None
) -> Tuple[Tensor, Tuple[Tensor, ...]]:
    """
    Advance `cell` by one timestep.

    x_t is [C] or [C×1]; state defaults to zeros. Returns the new hidden
    state (same rank as x_t) and the full state tuple, (h, c) for LSTM and
    (h,) for GRU.
    """
    x_t = as_tensor(x_t)
    vector = x_t.ndim == 1
    column = reshape(x_t, (x_t.shape[0], 1)) if vector else x_t
    if state is None:
        state = cell.initial_state()
    U = cell.units
    zx = cell.project(column)
    zh = cell.recurrent_weight @ state[0]

    if cell.kind == "LSTM":
        h_prev, c_prev = state
        z = zx + zh
        i = sigmoid(z[0:U])
        f = sigmoid(z[U:2 * U])
        g = tanh(z[2 * U:3 * U])
        o = sigmoid(z[3 * U:4 * U])
        c = f * c_prev + i * g
        h = o * tanh(c)
        new_state = (h, c)
    else:
        (h_prev,) = state
        r = sigmoid(zx[0:U] + zh[0:U])
        z = sigmoid(zx[U:2 * U] + zh[U:2 * U])
        n = tanh(zx[2 * U:3 * U] + r * zh[2 * U:3 * U])
        h = n + z * (h_prev - n)
        new_state = (h,)

    output = reshape(h, (U,)) if vector else h
    return output, new_state


def bidirectional_wrap(forward_cell: RecurrentCell, backward_cell: RecurrentCell, x: Tensor) -> Tensor:
    """
    Forward pass over t=1..T stacked on a backward pass over t=T..1.

    Returns [2U×T] (or [N×2U×T]); rows 0..U−1 are the forward direction.
    """
    forward = forward_cell.run(x)
    backward = flip(backward_cell.run(flip(x, axis=-1)), axis=-1)
    return concat([forward, backward], axis=-2)


@dataclass(frozen=True)
class TcnBlockWeights:
    conv1: ConvWeights
    conv2: ConvWeights
    projection: Optional[ConvWeights] = None


def tcn_block(x: Tensor, weights: TcnBlockWeights, dilation: int) -> Tensor:
    """
    Two causal dilated convolutions, each followed by ReLU, plus a residual
    connection (1×1 projection when the widths differ). The sum is not
    passed through a further activation.
    """
    h = relu(weights.conv1.apply(x, dilation=dilation, causal=True))
    h = relu(weights.conv2.apply(h, dilation=dilation, causal=True))
    if weights.projection is None:
        residual = x
    else:
        residual = pointwise_conv1d(x, weights.projection.weight, weights.projection.bias)
    return h + residual
