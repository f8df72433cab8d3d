import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadnet import tensor as T
from quadnet.nn import layers
from quadnet.tensor import GradCheckError, Tape, Tensor, backward, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def run(fn, *xs):
    with Tape() as tape:
        out = fn(*xs)
    backward(out, tape)
    return out


def test_elementwise_examples():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(T.scale(Tensor([1.0, 2.0]), 0.0).data, [0.0, 0.0])


def test_sub_self_gradient_cancels():
    x = leaf([1.0, -2.0, 3.0])
    out = run(lambda a: T.sub(a, a).sum(), x)
    assert np.all(out.data == 0)
    assert np.array_equal(x.grad, np.zeros(3))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_no_implicit_broadcast_except_scalars():
    with pytest.raises(ValueError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert T.mul(Tensor(np.ones((2, 3))), 2.0).shape == (2, 3)


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(T.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]])).data, [[2.0]])
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_finite_difference(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = Tensor(rng.standard_normal((3, 2)))
    assert grad_check(lambda x, y: (T.matmul(x, y) * w).sum(), [a, b], h=1e-5) < 1e-4


def test_euclidean_distance_examples(rng):
    assert float(T.euclidean_distance(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).data) == 5.0
    a = leaf([1.0, 2.0])
    d = run(lambda x: T.euclidean_distance(x, Tensor([1.0, 2.0])), a)
    assert float(d.data) == 0.0
    assert np.array_equal(a.grad, [0.0, 0.0])
    x, y = rng.standard_normal(100), rng.standard_normal(100)
    assert grad_check(T.euclidean_distance, [x, y]) < 1e-4


def test_euclidean_gradient_antisymmetry(rng):
    a, b = leaf(rng.standard_normal(7)), leaf(rng.standard_normal(7))
    run(T.euclidean_distance, a, b)
    np.testing.assert_allclose(a.grad, -b.grad, rtol=0, atol=1e-12)


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    run(lambda v: v.sum(), x)
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    y = leaf([1.0, 2.0, 3.0])
    run(lambda v: T.scale(T.mul(v, v).sum(), 0.0), y)
    assert np.array_equal(y.grad, [0.0, 0.0, 0.0])


def test_backward_accumulates_and_requires_scalar():
    x = leaf([1.0, 2.0])
    run(lambda v: T.mul(v, v).sum(), x)
    run(lambda v: T.mul(v, v).sum(), x)
    assert np.array_equal(x.grad, [4.0, 8.0])
    with Tape() as tape:
        out = T.mul(x, x)
    with pytest.raises(ValueError):
        backward(out, tape)


def test_backward_linearity(rng):
    # grad of (f + g) equals grad f + grad g
    data = rng.standard_normal(5)
    f = lambda v: T.mul(v, v).sum()
    g = lambda v: T.relu(v).sum()
    x1, x2, x3 = leaf(data), leaf(data), leaf(data)
    run(lambda v: T.add(f(v), g(v)), x1)
    run(f, x2)
    run(g, x3)
    np.testing.assert_allclose(x1.grad, x2.grad + x3.grad, atol=1e-12)


def test_tape_is_topologically_ordered(rng):
    x = leaf(rng.standard_normal(3))
    with Tape() as tape:
        y = T.relu(T.mul(x, x))
        T.add(y, T.scale(y, 2.0)).sum()
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp._node is None or id(inp) in produced
        produced.add(id(node.out))


def test_nothing_recorded_without_tape():
    x = leaf([1.0])
    y = T.mul(x, x)
    assert y._node is None


def test_grad_check_thresholds(rng):
    x = rng.standard_normal((4, 3))
    w, b = rng.standard_normal((2, 3)), rng.standard_normal(2)
    g = Tensor(rng.standard_normal((4, 2)))
    linear = lambda x_, w_, b_: (layers.linear(x_, w_, b_) * g).sum()
    assert grad_check(linear, [x, w, b]) < 1e-6
    probe = rng.standard_normal(20)
    probe = np.where(np.abs(probe) < 1e-3, 0.5, probe)   # |x| > 10h
    gw = Tensor(rng.standard_normal(20))
    assert grad_check(lambda v: (T.relu(v) * gw).sum(), [probe]) < 1e-6
    assert grad_check(lambda v: T.scale(v.sum(), 0.0), [probe]) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_names_nonfinite_op():
    with pytest.raises(GradCheckError, match="div"):
        grad_check(lambda v: T.div(v, T.sub(v, v)).sum(), [np.ones(2)])


def test_precision_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_forward_stays_finite(a, b):
    out = T.euclidean_distance(Tensor(a), Tensor(b))
    assert np.all(np.isfinite(out.data)) and np.all(out.data >= 0)
