import numpy as np
import pytest

from src.core.errors import ContractError, DimensionError, NumericalError
from src.tensor import (
    Tensor,
    backward,
    build_graph,
    concat,
    elementwise,
    flip,
    matmul,
    reshape,
)


def test_add_backward_gives_ones():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    (a + b).sum().backward()
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_mul_matches_hand_derivative():
    a = Tensor(3.0, requires_grad=True)
    b = Tensor(-2.0, requires_grad=True)
    (a * b).backward()
    assert a.grad == pytest.approx(-2.0)
    assert b.grad == pytest.approx(3.0)


def test_backward_twice_accumulates():
    x = Tensor([1.0, -1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    first = x.grad.copy()
    y.backward()
    assert np.allclose(x.grad, 2 * first)


def test_shared_subexpression_gradients_add_up():
    x = Tensor(2.0, requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(5.0)


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_incompatible_shapes_raise_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        Tensor([np.nan])
    big = Tensor([1e308])
    with pytest.raises(NumericalError):
        big * 10.0


def test_sigmoid_stays_finite_for_large_inputs():
    out = Tensor([-1000.0, 0.0, 1000.0]).sigmoid()
    assert np.allclose(out.data, [0.0, 0.5, 1.0])


def test_graph_is_topologically_ordered():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    out = ((a * b).relu() + a).sum()
    graph = build_graph(out)
    for node in graph.nodes:
        assert all(i < node.output for i in node.inputs)
    assert graph.tensors[-1] is out


def test_no_graph_without_gradients():
    out = Tensor([1.0]) * Tensor([2.0])
    assert not out.requires_grad
    assert build_graph(out).nodes[0].inputs == ()


def test_elementwise_dispatch_and_arity():
    out = elementwise("relu", Tensor([-1.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 2.0])
    with pytest.raises(ContractError):
        elementwise("relu", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ContractError):
        elementwise("softplus", Tensor([1.0]))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "sigmoid", "tanh"])
def test_elementwise_gradients(op, rng, gradcheck):
    for _ in range(5):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        inputs = (a, b) if op in ("add", "sub", "mul") else (a,)
        assert gradcheck(lambda: (elementwise(op, *inputs) * w).sum(), inputs) < 1e-6


def test_structural_op_gradients(rng, gradcheck):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)))

    def loss():
        joined = concat([matmul(a, b), c], axis=0)
        return (flip(joined, axis=1) * w).sum() + reshape(a, (6,))[1:4].sum()

    assert gradcheck(loss, [a, b, c]) < 1e-6


def test_getitem_gradient_scatters_into_slice():
    x = Tensor(np.arange(6.0), requires_grad=True)
    x[1:3].sum().backward()
    assert np.array_equal(x.grad, [0, 1, 1, 0, 0, 0])
