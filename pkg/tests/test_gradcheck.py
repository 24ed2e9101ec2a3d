import numpy as np
import pytest

from normssl import tensor as T
from normssl.gradcheck import NonDeterministicError, check_many, grad_check, rel_error
from normssl.norms import weight_standardize
from normssl.verify import gradient_cases, run_verification


def test_sum_is_exact(rng):
    rep = grad_check(lambda x: T.tsum(x), rng.standard_normal((3, 4)))
    assert rep.passed
    assert rep.max_rel_error < 1e-9


def test_ws_conv_passes(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    r = rng.standard_normal((2, 4, 4, 2))

    def f(w):
        return T.tsum(T.mul(T.conv2d(x, weight_standardize(w, 1e-4), 1, 1), r))

    assert grad_check(f, rng.standard_normal((3, 3, 3, 2))).passed


def test_relu_at_zero_is_excluded():
    rep = grad_check(lambda x: T.tsum(T.relu(x)), np.array([0.0, 1.0, -2.0]))
    assert rep.excluded == [(0,)]
    assert rep.checked == 2
    assert rep.passed


def test_nondeterministic_function_detected():
    draws = np.random.default_rng(0)

    def noisy(x):
        return T.tsum(T.mul(x, float(draws.standard_normal())))

    with pytest.raises(NonDeterministicError):
        grad_check(noisy, np.ones(3))


def test_wrong_gradient_is_caught():
    def bad_square(x):
        # forward x^2, backward claims 3x
        out = T._make(x.data**2, (x,), lambda g: (3 * x.data * g,), "bad")
        return T.tsum(out)

    assert not grad_check(bad_square, np.array([1.0, 2.0])).passed


def test_rel_error_floor():
    assert rel_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)


def test_check_many_merges_worst(rng):
    rep = check_many(lambda x: T.tsum(T.mul(x, x)), [rng.standard_normal(3) for _ in range(4)])
    assert rep.checked == 12 and rep.passed


@pytest.mark.parametrize("name", list(gradient_cases(np.random.default_rng(0))))
def test_every_case_passes(name):
    rng = np.random.default_rng(7)
    f, sample = gradient_cases(rng)[name]
    assert check_many(f, [sample() for _ in range(5)]).passed


@pytest.mark.parametrize("fault,case", [
    ("relu", None),
    ("conv2d", "grad conv2d (weight)"),
    ("matmul", "grad linear (weight)"),
    ("standardize", "grad layer_norm"),
])
def test_injected_fault_is_detected(fault, case):
    if fault == "relu":
        def f(x):
            return T.tsum(T.mul(T.relu(x), x))

        with T.inject_fault("relu"):
            assert not grad_check(f, np.array([0.5, 1.5, -1.0])).passed
        return
    results = {r.name: r for r in run_verification(cases=1, fault=fault)}
    assert not results[case].passed


def test_rel_error_floor_scales_with_gradient():
    # a 1e-6 component next to a 10.0 one is judged against 1e-4
    err = rel_error(np.array([10.0, 1e-6]), np.array([10.0, 1e-6 + 5e-10]))
    assert err[1] == pytest.approx(5e-6)
