import numpy as np
import pytest

from normssl import tensor as T
from normssl.tensor import GraphConsumedError, NonFiniteError, Tensor, forward_op, no_grad


def test_add_elementwise():
    assert np.array_equal(T.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    assert np.array_equal(T.matmul(np.eye(3), a).data, a)


def test_conv_all_ones_sums_to_nine():
    out = T.conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    got = T.conv2d(x, w, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (5 + 2 - 3) // 2 + 1
    ref = np.zeros((2, ho, ho, 4))
    for n in range(2):
        for i in range(ho):
            for j in range(ho):
                patch = xp[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
                ref[n, i, j] = np.einsum("hwc,hwco->o", patch, w)
    assert np.allclose(got, ref, atol=1e-12)


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.mean(x).backward()
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, 2.0)
    T.tsum(T.add(y, y)).backward()
    assert x.grad[0] == 4.0


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(x, 2.0).backward()


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_relu_derivative_zero_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad


def test_forward_op_registry():
    assert np.array_equal(forward_op("add", [1.0], [2.0]).data, [3.0])
    with pytest.raises(KeyError):
        forward_op("nope", [1.0])


def test_getitem_scatter_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.tsum(T.getitem(x, np.array([0, 0, 3]))).backward()
    assert np.array_equal(x.grad, [2.0, 0.0, 0.0, 1.0])


def test_logsumexp_stable():
    big = T.logsumexp(Tensor([1000.0, 1000.0]), axis=0).item()
    assert big == pytest.approx(1000.0 + np.log(2.0))


def test_forward_repeatable(rng):
    x = rng.standard_normal((2, 6, 6, 3))
    w = rng.standard_normal((3, 3, 3, 5))
    a = T.conv2d(x, w, 1, 1).data
    b = T.conv2d(x, w, 1, 1).data
    assert a.tobytes() == b.tobytes()
