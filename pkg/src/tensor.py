"""
Minimal dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a float64 numpy array. Operations record their inputs while at
least one input requires a gradient; the graph is rebuilt on every forward
pass and discarded after backward. Broadcasting is limited to scalar-vs-tensor
and equal shapes.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.errors import ContractError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Dense n-dimensional float64 array with an optional gradient.
    """

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        _check_finite(array, "leaf")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._op = "leaf"
        self._backward_fn: Optional[BackwardFn] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        op: str,
        backward_fn: BackwardFn,
    ) -> "Tensor":
        """
        Build the output of a differentiable operation.

        `backward_fn` maps the upstream gradient to one gradient per parent
        (None for parents that need none). The node is only recorded when a
        parent requires a gradient.
        """
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"Non-finite value produced by '{op}'")


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass(frozen=True)
class GraphNode:
    op: str
    inputs: Tuple[int, ...]
    output: int


@dataclass
class Graph:
    """
    Recorded operations in topological order: the inputs of node i always
    have indices lower than i. `tensors[i]` is the output of `nodes[i]`.
    """
    nodes: List[GraphNode]
    tensors: List[Tensor]


def build_graph(root: Tensor) -> Graph:
    """Topologically order every tensor reachable from `root`."""
    index: Dict[int, int] = {}
    nodes: List[GraphNode] = []
    tensors: List[Tensor] = []
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        key = id(tensor)
        if key in index:
            continue
        if expanded:
            position = len(nodes)
            index[key] = position
            inputs = tuple(index[id(p)] for p in tensor._parents)
            nodes.append(GraphNode(op=tensor._op, inputs=inputs, output=position))
            tensors.append(tensor)
            continue
        stack.append((tensor, True))
        for parent in tensor._parents:
            if id(parent) not in index:
                stack.append((parent, False))
    return Graph(nodes=nodes, tensors=tensors)


def backward(root: Tensor) -> None:
    """
    Accumulate dRoot/dTensor into `.grad` of every tensor reachable from
    `root` that requires a gradient. Calling twice without zeroing adds up.
    """
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        logger.debug("backward() called on a tensor that requires no gradient")
        return

    graph = build_graph(root)
    pending: Dict[int, np.ndarray] = {len(graph.nodes) - 1: np.ones_like(root.data)}
    for position in range(len(graph.nodes) - 1, -1, -1):
        upstream = pending.pop(position, None)
        if upstream is None:
            continue
        tensor = graph.tensors[position]
        tensor.grad = upstream.copy() if tensor.grad is None else tensor.grad + upstream
        if tensor._backward_fn is None:
            continue
        parent_grads = tensor._backward_fn(upstream)
        for parent_position, grad in zip(graph.nodes[position].inputs, parent_grads):
            if grad is None or not graph.tensors[parent_position].requires_grad:
                continue
            if parent_position in pending:
                pending[parent_position] = pending[parent_position] + grad
            else:
                pending[parent_position] = grad


def _broadcast_pair(a, b, op: str) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    raise DimensionError(f"'{op}' cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b, "add")

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), "add", backward_fn)


def sub(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b, "sub")

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a, b) -> Tensor:
    a, b = _broadcast_pair(a, b, "mul")

    def backward_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), "mul", backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward_fn(g):
        return (g * value * (1.0 - value),)

    return Tensor.from_op(value, (a,), "sigmoid", backward_fn)


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - value * value),)

    return Tensor.from_op(value, (a,), "tanh", backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), "relu", backward_fn)


_ELEMENTWISE = {
    "add": (add, 2),
    "sub": (sub, 2),
    "mul": (mul, 2),
    "sigmoid": (sigmoid, 1),
    "tanh": (tanh, 1),
    "relu": (relu, 1),
}


def elementwise(op: str, *inputs) -> Tensor:
    """Apply one of add, sub, mul, sigmoid, tanh, relu by name."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"Unknown elementwise operation '{op}'")
    fn, arity = _ELEMENTWISE[op]
    if len(inputs) != arity:
        raise ContractError(f"'{op}' takes {arity} input(s), got {len(inputs)}")
    return fn(*(as_tensor(x) for x in inputs))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), "matmul", backward_fn)


def tensor_sum(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.full(a.shape, float(g)),)

    return Tensor.from_op(np.asarray(a.data.sum()), (a,), "sum", backward_fn)


def tensor_mean(a: Tensor) -> Tensor:
    count = a.data.size

    def backward_fn(g):
        return (np.full(a.shape, float(g) / count),)

    return Tensor.from_op(np.asarray(a.data.mean()), (a,), "mean", backward_fn)


def getitem(a: Tensor, index) -> Tensor:
    value = np.array(a.data[index])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(value, (a,), "getitem", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat failed: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(value, tuple(tensors), "concat", backward_fn)


def flip(a: Tensor, axis: int = -1) -> Tensor:
    def backward_fn(g):
        return (np.flip(g, axis=axis).copy(),)

    return Tensor.from_op(np.flip(a.data, axis=axis).copy(), (a,), "flip", backward_fn)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"Cannot reshape {a.shape} to {shape}") from e

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(value.copy(), (a,), "reshape", backward_fn)
