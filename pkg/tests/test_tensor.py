import numpy as np
import pytest

from phnn import ops
from phnn.errors import AlreadyConsumed, LengthMismatch, NonFinite, NotScalar
from phnn.tensor import Tape, Tensor, backward, current_tape, no_grad, tensor_create


def test_create_from_flat_values():
    t = tensor_create([2, 2], [1, 2, 3, 4])
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])
    assert t.data.dtype == np.float64


def test_create_zero_vector_has_zero_grad():
    t = tensor_create([3], [0, 0, 0], requires_grad=True)
    np.testing.assert_array_equal(t.grad, [0, 0, 0])


def test_create_rejects_length_mismatch():
    with pytest.raises(LengthMismatch):
        tensor_create([2], [1, 2, 3])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_create_rejects_non_finite(bad):
    with pytest.raises(NonFinite):
        tensor_create([2], [1.0, bad])


def test_linear_derivative():
    x = tensor_create([1], [2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 3.0)
        backward(ops.total(y), tape)
    assert x.grad[0] == 3.0


def test_square_derivative():
    x = tensor_create([1], [5.0], requires_grad=True)
    with Tape() as tape:
        backward(ops.total(ops.mul(x, x)), tape)
    assert x.grad[0] == 10.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ops.scale(x, 2.0)
        with pytest.raises(NotScalar):
            backward(y)


def test_second_backward_is_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ops.total(ops.mul(x, x))
        backward(y, tape)
        with pytest.raises(AlreadyConsumed):
            backward(y, tape)


def test_recording_on_consumed_tape_is_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        backward(ops.total(x), tape)
        with pytest.raises(AlreadyConsumed):
            ops.scale(x, 2.0)


def test_default_tape_is_replaced_after_backward():
    x = Tensor(np.ones(2), requires_grad=True)
    first = current_tape()
    backward(ops.total(ops.scale(x, 2.0)))
    assert current_tape() is not first
    backward(ops.total(ops.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_shared_input_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
        backward(ops.total(y), tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_tape_nodes_are_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = ops.scale(x, 2.0)
        b = ops.mul(a, x)
        ops.total(b)
        seen = {id(x)}
        for node in tape.nodes:
            for inp in node.inputs:
                assert inp.node is None or id(inp) in seen
            seen.add(id(node.output))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = ops.scale(x, 2.0)
        assert len(tape) == 0
        assert not y.requires_grad


def test_constants_get_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.array([2.0, 3.0]))
    with Tape() as tape:
        backward(ops.total(ops.mul(x, c)), tape)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 3.0])
