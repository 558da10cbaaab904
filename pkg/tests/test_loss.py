import numpy as np
import pytest

from odestim.errors import NonPositiveDelta, NonPositiveSigma, ShapeMismatch
from odestim.loss import HuberParams, huber, huber_grad, weighted_l2


@pytest.mark.parametrize("z, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_huber_hand_values(z, expected):
    assert huber(z, 1.0) == expected


@pytest.mark.parametrize("z, expected", [(0.5, 0.5), (-3.0, -1.0), (3.0, 1.0), (0.0, 0.0)])
def test_huber_grad_hand_values(z, expected):
    assert huber_grad(z, 1.0) == expected


@pytest.mark.parametrize("delta", [0.0, -1.0, float("nan")])
def test_bad_delta_rejected(delta):
    with pytest.raises(NonPositiveDelta):
        huber(1.0, delta)
    with pytest.raises(NonPositiveDelta):
        huber_grad(1.0, delta)
    with pytest.raises(NonPositiveDelta):
        HuberParams(delta)


@pytest.mark.parametrize("delta", [0.3, 1.0, 2.5])
def test_knee_is_continuous(delta):
    for z in (delta - 1e-12, delta + 1e-12):
        assert abs(huber(z, delta) - delta**2 / 2) < 1e-11 * max(delta, 1)
    assert abs(huber(delta, delta) - delta**2 / 2) < 1e-20
    assert huber_grad(delta * (1 - 1e-12), delta) == pytest.approx(delta, abs=1e-11)
    assert huber_grad(delta * (1 + 1e-12), delta) == delta


def test_grad_matches_central_differences():
    rng = np.random.default_rng(0)
    delta = 1.3
    z = rng.uniform(-5, 5, 200)
    z = z[np.abs(np.abs(z) - delta) > 1e-3]
    h = 1e-6
    fd = (huber(z + h, delta) - huber(z - h, delta)) / (2 * h)
    np.testing.assert_allclose(huber_grad(z, delta), fd, atol=1e-8)


def test_regimes():
    z = np.linspace(-1, 1, 101)
    np.testing.assert_array_equal(huber(z, 1.0), 0.5 * z * z)
    big = np.array([1e6, -1e8])
    np.testing.assert_allclose(huber(big, 2.0) / np.abs(big), 2.0, rtol=1e-5)


def test_even_odd_nonnegative():
    z = np.random.default_rng(1).normal(size=50) * 3
    np.testing.assert_array_equal(huber(z), huber(-z))
    np.testing.assert_array_equal(huber_grad(z), -huber_grad(-z))
    assert np.all(huber(z) >= 0)
    assert np.all(np.abs(huber_grad(z, 0.7)) <= 0.7)


def test_weighted_l2():
    assert weighted_l2(np.zeros((3, 2)), np.ones((3, 2))) == 0
    assert weighted_l2([[1, 2]], [[1, 1]]) == 5
    assert weighted_l2([[2]], [[2]]) == 1
    with pytest.raises(ShapeMismatch):
        weighted_l2([[1, 2]], [[1]])
    with pytest.raises(NonPositiveSigma):
        weighted_l2([[1, 2]], [[1, 0]])
