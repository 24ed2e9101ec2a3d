import logging
import math

import numpy as np
import pytest

from normssl.objectives import byol_loss, cosine_similarity, infonce_loss
from normssl.tensor import Tensor
from normssl.verify import infonce_bruteforce


@pytest.mark.parametrize("a,b,expected", [
    ([1.0, 0.0], [1.0, 0.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([2.0, 0.0], [1.0, 0.0], 1.0),
])
def test_cosine_examples(a, b, expected):
    assert cosine_similarity([a], [b]).item() == pytest.approx(expected)


def test_cosine_zero_vector_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert cosine_similarity([[0.0, 0.0]], [[1.0, 0.0]]).item() == 0.0
    assert "zero-norm" in caplog.text


def test_byol_perfect_and_orthogonal():
    z = np.eye(3)
    assert byol_loss(z, z).item() == pytest.approx(-1.0)
    assert byol_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == pytest.approx(0.0)


def test_byol_rejects_tracked_target():
    with pytest.raises(ValueError):
        byol_loss(np.ones((2, 3)), Tensor(np.ones((2, 3)), requires_grad=True))


def test_byol_in_range(rng):
    for _ in range(20):
        v = byol_loss(rng.standard_normal((5, 4)), rng.standard_normal((5, 4))).item()
        assert -1.0 <= v <= 1.0


def test_infonce_single_pair_is_zero():
    z = np.array([[1.0, 0.0]])
    lv = infonce_loss(z, z, 1.0)
    assert lv.positive == pytest.approx(-1.0)
    assert lv.negative == pytest.approx(1.0)
    assert lv.item() == pytest.approx(0.0, abs=1e-15)


def test_infonce_matches_bruteforce(rng):
    for b in (1, 2, 3, 4):
        z, zp = rng.standard_normal((b, 5)), rng.standard_normal((b, 5))
        assert infonce_loss(z, zp, 0.3).item() == pytest.approx(infonce_bruteforce(z, zp, 0.3), abs=1e-8)


def test_infonce_negative_set_membership():
    """The log-sum-exp for anchor z_0 runs over z'_0, z'_1 and z_1, never z_0."""
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    zp = np.array([[0.6, 0.8], [-1.0, 0.0]])
    tau = 0.5

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    total = 0.0
    for a_set, p_set in ((z, zp), (zp, z)):
        for i in range(2):
            others = [p_set[0], p_set[1], a_set[1 - i]]
            total += -cos(a_set[i], p_set[i]) / tau + math.log(sum(math.exp(cos(a_set[i], o) / tau) for o in others))
    assert infonce_loss(z, zp, tau).item() == pytest.approx(total / 4, abs=1e-12)


def test_infonce_decomposition_reassembles(rng):
    lv = infonce_loss(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), 0.2)
    assert lv.positive + lv.negative == pytest.approx(lv.item(), abs=1e-12)


def test_infonce_lower_bound(rng):
    tau = 0.25
    for _ in range(20):
        assert infonce_loss(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), tau).item() >= -1 / tau


def test_infonce_improves_as_positive_aligns(rng):
    z = rng.standard_normal((3, 4))
    other = rng.standard_normal((3, 4))
    losses = [infonce_loss(z, (1 - t) * other + t * z, 0.5).item() for t in (0.0, 0.5, 0.9)]
    assert losses[0] > losses[1] > losses[2]


def test_infonce_bad_inputs():
    with pytest.raises(ValueError):
        infonce_loss(np.ones((2, 3)), np.ones((3, 3)), 0.1)
    with pytest.raises(ValueError):
        infonce_loss(np.ones((2, 3)), np.ones((2, 3)), 0.0)
