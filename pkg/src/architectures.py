"""
Model zoo: hyperparameters, architecture assembly and the runnable
sequence-to-sequence model.

Every architecture maps an input [C×T] to per-timestep logits [2×T]:
an optional convolutional stage (CNN or TCN blocks, standard or depthwise
separable), an optional recurrent stage, and a per-timestep linear head.
"""
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.core.errors import ConfigError
from src.functional import dropout as apply_dropout
from src.functional import pointwise_conv1d
from src.layers import (
    ConvWeights,
    RecurrentCell,
    TcnBlockWeights,
    bidirectional_wrap,
    tcn_block,
)
from src.tensor import Tensor, as_tensor, relu

logger = logging.getLogger(__name__)

HEAD_WIDTH = 2
VALID_CHANNELS = (1, 3, 5)


class ModelKind(str, Enum):
    CNN_ST = "CNN-ST"
    CNN_DW = "CNN-DW"
    TCN_ST = "TCN-ST"
    TCN_DW = "TCN-DW"
    LSTM = "LSTM"
    GRU = "GRU"
    BILSTM = "BiLSTM"
    BIGRU = "BiGRU"
    CNN_RNN_ST = "CNN-RNN-ST"
    CNN_RNN_DW = "CNN-RNN-DW"
    TCN_RNN_ST = "TCN-RNN-ST"
    TCN_RNN_DW = "TCN-RNN-DW"


class RnnCellKind(str, Enum):
    LSTM = "LSTM"
    GRU = "GRU"
    BILSTM = "BiLSTM"
    BIGRU = "BiGRU"


# Labels used by the published result tables
TABLE_ALIASES = {
    "CNN-RNN": ModelKind.CNN_RNN_ST,
    "TCN-RNN": ModelKind.TCN_RNN_DW,
    "RNN (lstmLayer)": ModelKind.LSTM,
    "RNN (gruLayer)": ModelKind.GRU,
    "RNN (bilstmLayer)": ModelKind.BILSTM,
}
DISPLAY_NAMES = {
    ModelKind.CNN_RNN_ST: "CNN-RNN",
    ModelKind.TCN_RNN_DW: "TCN-RNN",
}

CONV_KINDS = {
    ModelKind.CNN_ST, ModelKind.CNN_DW, ModelKind.TCN_ST, ModelKind.TCN_DW,
    ModelKind.CNN_RNN_ST, ModelKind.CNN_RNN_DW, ModelKind.TCN_RNN_ST, ModelKind.TCN_RNN_DW,
}
RNN_KINDS = {
    ModelKind.LSTM, ModelKind.GRU, ModelKind.BILSTM, ModelKind.BIGRU,
    ModelKind.CNN_RNN_ST, ModelKind.CNN_RNN_DW, ModelKind.TCN_RNN_ST, ModelKind.TCN_RNN_DW,
}
TCN_KINDS = {ModelKind.TCN_ST, ModelKind.TCN_DW, ModelKind.TCN_RNN_ST, ModelKind.TCN_RNN_DW}
DEPTHWISE_KINDS = {ModelKind.CNN_DW, ModelKind.TCN_DW, ModelKind.CNN_RNN_DW, ModelKind.TCN_RNN_DW}
HYBRID_KINDS = CONV_KINDS & RNN_KINDS
STANDARD_COUNTERPART = {
    ModelKind.CNN_DW: ModelKind.CNN_ST,
    ModelKind.TCN_DW: ModelKind.TCN_ST,
    ModelKind.CNN_RNN_DW: ModelKind.CNN_RNN_ST,
    ModelKind.TCN_RNN_DW: ModelKind.TCN_RNN_ST,
}
DEFAULT_HYBRID_CELL = RnnCellKind.BILSTM


def resolve_model_kind(name: str) -> ModelKind:
    """Accept canonical names and the published table labels."""
    if name in TABLE_ALIASES:
        return TABLE_ALIASES[name]
    try:
        return ModelKind(name)
    except ValueError:
        raise ConfigError(f"Unknown model kind '{name}'")


def display_name(kind: ModelKind) -> str:
    return DISPLAY_NAMES.get(kind, kind.value)


class HyperParams(BaseModel):
    """
    One point of the hyperparameter grid. Fields that do not apply to the
    model kind must be left unset.
    """
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_kind: ModelKind
    num_channels: int
    filter_size: Optional[int] = None
    num_blocks: Optional[int] = None
    num_filters: Optional[int] = None
    num_rnn_blocks: Optional[int] = None
    num_units: Optional[int] = None
    rnn_cell: Optional[RnnCellKind] = None

    @property
    def cell_kind(self) -> Optional[RnnCellKind]:
        """Recurrent cell used by the model, None for convolution-only kinds."""
        if self.model_kind not in RNN_KINDS:
            return None
        if self.model_kind in HYBRID_KINDS:
            return self.rnn_cell or DEFAULT_HYBRID_CELL
        return RnnCellKind(self.model_kind.value)

    def key(self) -> str:
        """Stable short hash used to name result files."""
        payload = self.model_dump_json(exclude_none=True)
        return hashlib.md5(payload.encode()).hexdigest()[:12]


def validate_hyperparams(hp: HyperParams) -> None:
    kind = hp.model_kind
    if hp.num_channels not in VALID_CHANNELS:
        raise ConfigError(f"num_channels must be one of {VALID_CHANNELS}, got {hp.num_channels}")

    conv_fields = {"filter_size": hp.filter_size, "num_blocks": hp.num_blocks, "num_filters": hp.num_filters}
    rnn_fields = {"num_rnn_blocks": hp.num_rnn_blocks, "num_units": hp.num_units}
    for group, applicable in ((conv_fields, kind in CONV_KINDS), (rnn_fields, kind in RNN_KINDS)):
        for name, value in group.items():
            if applicable and value is None:
                raise ConfigError(f"{kind.value} requires {name}")
            if not applicable and value is not None:
                raise ConfigError(f"{name} is not applicable to {kind.value}")
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
    if hp.rnn_cell is not None and kind not in HYBRID_KINDS:
        raise ConfigError(f"rnn_cell is not applicable to {kind.value}")
    if hp.filter_size is not None and hp.filter_size % 2 == 0:
        raise ConfigError(f"filter_size must be odd, got {hp.filter_size}")


@dataclass(frozen=True)
class LayerDescriptor:
    """
    kind: conv | dwconv | tcn | tcn_dw | rnn | linear.
    For rnn layers `cell` is LSTM or GRU and `direction` is forward or
    bidirectional; `units` is the per-direction width.
    """
    kind: str
    in_width: int
    out_width: int
    kernel: Optional[int] = None
    dilation: int = 1
    direction: Optional[str] = None
    cell: Optional[str] = None
    units: Optional[int] = None

    @property
    def stage(self) -> str:
        if self.kind == "rnn":
            return "rnn"
        if self.kind == "linear":
            return "head"
        return "conv"


@dataclass(frozen=True)
class LayerSpec:
    hyperparams: HyperParams
    layers: Tuple[LayerDescriptor, ...]

    def __post_init__(self):
        for previous, current in zip(self.layers, self.layers[1:]):
            if previous.out_width != current.in_width:
                raise ConfigError(
                    f"Layer widths disagree: {previous.kind} outputs {previous.out_width}, "
                    f"{current.kind} expects {current.in_width}"
                )
        if not self.layers or self.layers[-1].out_width != HEAD_WIDTH:
            raise ConfigError("Output head must produce 2 logits per timestep")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def conv_width(self) -> Optional[int]:
        widths = [layer.out_width for layer in self.layers if layer.stage == "conv"]
        return widths[0] if widths else None


def _build_layers(hp: HyperParams, conv_width: Optional[int]) -> Tuple[LayerDescriptor, ...]:
    kind = hp.model_kind
    layers: List[LayerDescriptor] = []
    width = hp.num_channels

    if kind in CONV_KINDS:
        separable = kind in DEPTHWISE_KINDS
        if kind in TCN_KINDS:
            layer_kind = "tcn_dw" if separable else "tcn"
        else:
            layer_kind = "dwconv" if separable else "conv"
        for block in range(hp.num_blocks):
            dilation = 2 ** block if kind in TCN_KINDS else 1
            layers.append(
                LayerDescriptor(
                    kind=layer_kind,
                    in_width=width,
                    out_width=conv_width,
                    kernel=hp.filter_size,
                    dilation=dilation,
                )
            )
            width = conv_width

    if kind in RNN_KINDS:
        cell_kind = hp.cell_kind
        bidirectional = cell_kind in (RnnCellKind.BILSTM, RnnCellKind.BIGRU)
        cell = "LSTM" if cell_kind in (RnnCellKind.LSTM, RnnCellKind.BILSTM) else "GRU"
        out_width = hp.num_units * (2 if bidirectional else 1)
        for _ in range(hp.num_rnn_blocks):
            layers.append(
                LayerDescriptor(
                    kind="rnn",
                    in_width=width,
                    out_width=out_width,
                    direction="bidirectional" if bidirectional else "forward",
                    cell=cell,
                    units=hp.num_units,
                )
            )
            width = out_width

    layers.append(LayerDescriptor(kind="linear", in_width=width, out_width=HEAD_WIDTH))
    return tuple(layers)


def weight_shapes(spec: LayerSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Name and shape of every trainable array, in checkpoint order."""
    shapes: List[Tuple[str, Tuple[int, ...]]] = []

    def separable(prefix: str, c_in: int, c_out: int, k: int) -> None:
        shapes.extend([
            (f"{prefix}.depth_weight", (c_in, k)),
            (f"{prefix}.depth_bias", (c_in,)),
            (f"{prefix}.point_weight", (c_out, c_in)),
            (f"{prefix}.point_bias", (c_out,)),
        ])

    def standard(prefix: str, c_in: int, c_out: int, k: int) -> None:
        shapes.extend([(f"{prefix}.weight", (c_out, c_in, k)), (f"{prefix}.bias", (c_out,))])

    for index, layer in enumerate(spec.layers):
        p = str(index)
        c_in, c_out, k = layer.in_width, layer.out_width, layer.kernel
        if layer.kind == "conv":
            standard(p, c_in, c_out, k)
        elif layer.kind == "dwconv":
            separable(p, c_in, c_out, k)
        elif layer.kind in ("tcn", "tcn_dw"):
            make = separable if layer.kind == "tcn_dw" else standard
            make(f"{p}.conv1", c_in, c_out, k)
            make(f"{p}.conv2", c_out, c_out, k)
            if c_in != c_out:
                shapes.extend([(f"{p}.projection.weight", (c_out, c_in)), (f"{p}.projection.bias", (c_out,))])
        elif layer.kind == "rnn":
            rows = {"LSTM": 4, "GRU": 3}[layer.cell] * layer.units
            directions = ("forward", "backward") if layer.direction == "bidirectional" else ("forward",)
            for direction in directions:
                shapes.extend([
                    (f"{p}.{direction}.input_weight", (rows, c_in)),
                    (f"{p}.{direction}.recurrent_weight", (rows, layer.units)),
                    (f"{p}.{direction}.bias", (rows,)),
                ])
        elif layer.kind == "linear":
            shapes.extend([(f"{p}.weight", (c_out, c_in)), (f"{p}.bias", (c_out,))])
        else:
            raise ConfigError(f"Unknown layer kind '{layer.kind}'")
    return shapes


def parameter_count(spec: LayerSpec) -> int:
    """Exact number of trainable scalars."""
    return int(sum(np.prod(shape) for _, shape in weight_shapes(spec)))


def multiply_count(spec: LayerSpec) -> int:
    """Weight multiplications needed per timestep of one forward pass."""
    total = 0
    for layer in spec.layers:
        c_in, c_out, k = layer.in_width, layer.out_width, layer.kernel
        if layer.kind == "conv":
            total += c_in * c_out * k
        elif layer.kind == "dwconv":
            total += c_in * k + c_in * c_out
        elif layer.kind == "tcn":
            total += c_in * c_out * k + c_out * c_out * k
        elif layer.kind == "tcn_dw":
            total += c_in * k + c_in * c_out + c_out * k + c_out * c_out
        if layer.kind in ("tcn", "tcn_dw") and c_in != c_out:
            total += c_in * c_out
        if layer.kind == "rnn":
            rows = {"LSTM": 4, "GRU": 3}[layer.cell] * layer.units
            directions = 2 if layer.direction == "bidirectional" else 1
            total += directions * rows * (c_in + layer.units)
        if layer.kind == "linear":
            total += c_in * c_out
    return total


def receptive_field(spec: LayerSpec) -> Optional[int]:
    """
    Number of input samples output[t] can depend on. None when a recurrent
    stage makes it unbounded. For a TCN stack of b blocks this is
    1 + 2(K−1)(2^b − 1).
    """
    if any(layer.kind == "rnn" for layer in spec.layers):
        return None
    field = 1
    for layer in spec.layers:
        if layer.kind in ("tcn", "tcn_dw"):
            field += 2 * (layer.kernel - 1) * layer.dilation
        elif layer.kind in ("conv", "dwconv"):
            field += layer.kernel - 1
    return field


def matched_depthwise_width(hp: HyperParams) -> int:
    """
    Convolution width for a depthwise kind so that its parameter count
    matches the standard counterpart with the same hyperparameters.

    Picks the width >= num_filters closest in parameter count to the
    standard model among widths whose per-timestep multiply count stays
    strictly below it; ties go to the narrower width.
    """
    standard_hp = hp.model_copy(update={"model_kind": STANDARD_COUNTERPART[hp.model_kind]})
    standard = LayerSpec(standard_hp, _build_layers(standard_hp, hp.num_filters))
    target = parameter_count(standard)
    target_multiplies = multiply_count(standard)

    best_width, best_gap = hp.num_filters, None
    width = hp.num_filters
    while True:
        candidate = LayerSpec(hp, _build_layers(hp, width))
        count = parameter_count(candidate)
        if multiply_count(candidate) < target_multiplies:
            gap = abs(count - target)
            if best_gap is None or gap < best_gap:
                best_width, best_gap = width, gap
        if count > target:
            break
        width += 1
    return best_width


def assemble(hp: HyperParams) -> LayerSpec:
    """
    Deterministic architecture for `hp`: conv/TCN stage, then the optional
    recurrent stage, then the 2-logit head.
    """
    validate_hyperparams(hp)
    conv_width = None
    if hp.model_kind in CONV_KINDS:
        if hp.model_kind in DEPTHWISE_KINDS:
            conv_width = matched_depthwise_width(hp)
        else:
            conv_width = hp.num_filters
    return LayerSpec(hyperparams=hp, layers=_build_layers(hp, conv_width))


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def initialize_weights(spec: LayerSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Glorot-uniform convolutions and linear maps, uniform ±sqrt(1/U) recurrent
    matrices, zero biases except the LSTM forget gate (1).
    """
    layers = spec.layers
    weights: Dict[str, np.ndarray] = {}
    for name, shape in weight_shapes(spec):
        index = int(name.split(".", 1)[0])
        layer = layers[index]
        if name.endswith("bias"):
            value = np.zeros(shape)
            if layer.kind == "rnn" and layer.cell == "LSTM":
                value[layer.units:2 * layer.units] = 1.0
        elif layer.kind == "rnn":
            limit = np.sqrt(1.0 / layer.units)
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("depth_weight"):
            value = _glorot(rng, shape, shape[1], shape[1])
        elif len(shape) == 3:
            value = _glorot(rng, shape, shape[1] * shape[2], shape[0] * shape[2])
        else:
            value = _glorot(rng, shape, shape[1], shape[0])
        weights[name] = value
    return weights


class SequenceModel:
    """
    Runnable model for a LayerSpec. Input [C×T] or [N×C×T] → logits [2×T]
    or [N×2×T].
    """

    def __init__(
        self,
        spec: LayerSpec,
        weights: Dict[str, np.ndarray],
        requires_grad: bool = True,
        dropout_seed: int = 0,
    ):
        expected = dict(weight_shapes(spec))
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ConfigError(f"Weights do not match architecture (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(np.shape(weights[name])) != shape:
                raise ConfigError(f"Weight {name} has shape {np.shape(weights[name])}, expected {shape}")
        self.spec = spec
        self.params: Dict[str, Tensor] = {
            name: Tensor(weights[name], requires_grad=requires_grad) for name in expected
        }
        # dropout masks when forward() is called without an explicit rng
        self.dropout_rng = np.random.default_rng(dropout_seed)

    @classmethod
    def initialize(cls, spec: LayerSpec, seed: int) -> "SequenceModel":
        return cls(spec, initialize_weights(spec, np.random.default_rng(seed)), dropout_seed=seed + 1)

    @property
    def hyperparams(self) -> HyperParams:
        return self.spec.hyperparams

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name, _ in weight_shapes(self.spec)]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: self.params[name].numpy() for name, _ in weight_shapes(self.spec)}

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def _conv_weights(self, prefix: str) -> ConvWeights:
        p = self.params
        if f"{prefix}.depth_weight" in p:
            return ConvWeights(
                depth_weight=p[f"{prefix}.depth_weight"],
                depth_bias=p[f"{prefix}.depth_bias"],
                point_weight=p[f"{prefix}.point_weight"],
                point_bias=p[f"{prefix}.point_bias"],
            )
        return ConvWeights(weight=p[f"{prefix}.weight"], bias=p[f"{prefix}.bias"])

    def _cell(self, prefix: str, cell: str) -> RecurrentCell:
        p = self.params
        return RecurrentCell(
            cell,
            p[f"{prefix}.input_weight"],
            p[f"{prefix}.recurrent_weight"],
            p[f"{prefix}.bias"],
        )

    def _apply(self, index: int, layer: LayerDescriptor, h: Tensor) -> Tensor:
        prefix = str(index)
        if layer.kind in ("conv", "dwconv"):
            return relu(self._conv_weights(prefix).apply(h))
        if layer.kind in ("tcn", "tcn_dw"):
            projection = None
            if f"{prefix}.projection.weight" in self.params:
                projection = ConvWeights(
                    weight=self.params[f"{prefix}.projection.weight"],
                    bias=self.params[f"{prefix}.projection.bias"],
                )
            block = TcnBlockWeights(
                conv1=self._conv_weights(f"{prefix}.conv1"),
                conv2=self._conv_weights(f"{prefix}.conv2"),
                projection=projection,
            )
            return tcn_block(h, block, dilation=layer.dilation)
        if layer.kind == "rnn":
            forward_cell = self._cell(f"{prefix}.forward", layer.cell)
            if layer.direction == "bidirectional":
                return bidirectional_wrap(forward_cell, self._cell(f"{prefix}.backward", layer.cell), h)
            return forward_cell.run(h)
        return pointwise_conv1d(h, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def forward(
        self,
        x,
        training: bool = False,
        dropout_rate: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        h = as_tensor(x)
        previous_stage = None
        for index, layer in enumerate(self.spec.layers):
            if training and dropout_rate > 0 and previous_stage is not None and layer.stage != previous_stage:
                h = apply_dropout(h, dropout_rate, rng if rng is not None else self.dropout_rng)
            h = self._apply(index, layer, h)
            previous_stage = layer.stage
        return h

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Per-timestep labels; ties between the two logits go to no-blink."""
        logits = self.forward(Tensor(np.asarray(x)))
        return (logits.data[..., 1, :] > logits.data[..., 0, :]).astype(np.int8)

    def frozen(self) -> "SequenceModel":
        """Copy whose weights do not record gradients (inference)."""
        return SequenceModel(self.spec, self.state_dict(), requires_grad=False)
