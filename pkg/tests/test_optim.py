import numpy as np
import pytest

from odestim.errors import BadHyperparameter, LengthMismatch, NonFiniteGradient, NonFiniteLoss
from odestim.optim import adam_new, adam_step, minimize, write_loss_history


def test_defaults():
    s = adam_new(3)
    assert (s.lr, s.beta1, s.beta2, s.eps) == (0.001, 0.9, 0.999, 1e-8)
    assert s.t == 0 and not s.m.any() and not s.v.any()


@pytest.mark.parametrize("kwargs", [dict(dim=0), dict(dim=2, lr=0), dict(dim=2, beta1=1.0),
                                    dict(dim=2, beta2=-0.1), dict(dim=2, eps=-1)])
def test_bad_hyperparameters(kwargs):
    with pytest.raises(BadHyperparameter):
        adam_new(**kwargs)


def test_first_step_by_hand():
    s = adam_new(1)
    theta = adam_step(s, np.array([0.0]), np.array([1.0]))
    # m = 0.1, v = 0.001, both corrected to exactly 1
    assert s.m[0] == pytest.approx(0.1, abs=1e-15)
    assert s.v[0] == pytest.approx(0.001, abs=1e-15)
    assert abs(s.m_hat[0] - 1.0) < 1e-12 and abs(s.v_hat[0] - 1.0) < 1e-12
    assert abs(theta[0] - (-0.001 / (1 + 1e-8))) < 1e-12
    assert s.t == 1


def test_first_step_bias_correction_exact():
    g = np.array([0.3, -2.0, 7.5])
    s = adam_new(3)
    theta = adam_step(s, np.zeros(3), g)
    np.testing.assert_allclose(s.m_hat, g, rtol=1e-14)
    np.testing.assert_allclose(s.v_hat, g * g, rtol=1e-14)
    np.testing.assert_array_equal(np.sign(theta), -np.sign(g))


def test_zero_gradient_keeps_params():
    s = adam_new(2)
    np.testing.assert_array_equal(adam_step(s, np.array([1.0, 2.0]), np.zeros(2)), [1.0, 2.0])


def test_step_errors():
    s = adam_new(2)
    with pytest.raises(LengthMismatch):
        adam_step(s, np.zeros(3), np.zeros(3))
    with pytest.raises(NonFiniteGradient):
        adam_step(s, np.zeros(2), np.array([np.nan, 0.0]))


def test_update_magnitude_bound():
    rng = np.random.default_rng(0)
    s = adam_new(5, lr=0.01)
    theta = np.zeros(5)
    for _ in range(200):
        new = adam_step(s, theta, rng.normal(size=5) * 10)
        assert np.all(np.abs(new - theta) <= 0.01 * 1.5)
        theta = new


def test_minimize_quadratic():
    theta, hist = minimize(lambda th: (0.5 * (th[0] - 3) ** 2, th - 3), [0.0], 2000,
                           adam_new(1, lr=0.05))
    assert abs(theta[0] - 3) < 1e-3
    assert len(hist) == 2000


def test_minimize_zero_gradient_and_determinism():
    theta, _ = minimize(lambda th: (1.0, np.zeros(2)), [1.0, -1.0], 10)
    np.testing.assert_array_equal(theta, [1.0, -1.0])
    f = lambda th: (float(np.sum(np.cos(th))), -np.sin(th))
    a = minimize(f, [0.1, 0.2], 50)
    b = minimize(f, [0.1, 0.2], 50)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_minimize_returns_best_not_last():
    # lr large enough to overshoot and oscillate around the minimum
    f = lambda th: (abs(th[0]), np.sign(th))
    theta, hist = minimize(f, [0.25], 200, adam_new(1, lr=0.1))
    assert abs(theta[0]) == pytest.approx(hist.min())
    assert hist.min() <= hist[-1]


def test_minimize_errors():
    with pytest.raises(BadHyperparameter):
        minimize(lambda th: (0.0, th), [0.0], 0)
    calls = iter([1.0, 0.5, np.inf])
    with pytest.raises(NonFiniteLoss) as info:
        minimize(lambda th: (next(calls), np.ones(1)), [0.0], 10)
    assert info.value.step == 2


def test_early_stop():
    _, hist = minimize(lambda th: (1.0, np.zeros(1)), [0.0], 5000, early_stop_tol=1e-10,
                       early_stop_window=100)
    assert len(hist) == 101


def test_write_loss_history(tmp_path):
    path = tmp_path / "h.csv"
    write_loss_history([3.0, 0.5], path)
    assert path.read_text() == "step,loss\n0,3\n1,0.5\n"
