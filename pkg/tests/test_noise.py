import numpy as np
import pytest

from odestim.dynamics import Trajectory, get_system, integrate
from odestim.errors import EmptyTrajectory
from odestim.noise import NoiseSpec, corrupt, noise_matrix, pink_noise, white_noise


def test_white_deterministic_and_moments():
    a = white_noise(100_000, 42)
    np.testing.assert_array_equal(a, white_noise(100_000, 42))
    assert not np.array_equal(a, white_noise(100_000, 43))
    assert -0.02 < a.mean() < 0.02
    assert 0.97 < a.var() < 1.03
    r1 = np.corrcoef(a[:-1], a[1:])[0, 1]
    assert abs(r1) < 0.02


@pytest.mark.parametrize("n", [8, 1001, 65536])
def test_pink_normalized(n):
    x = pink_noise(n, 3)
    assert abs(x.mean()) < 1e-12
    assert abs(x.var() - 1) < 1e-9
    np.testing.assert_array_equal(x, pink_noise(n, 3))


def test_pink_psd_slope():
    n = 2**16
    slopes = []
    for seed in range(3):
        x = pink_noise(n, seed)
        psd = np.abs(np.fft.rfft(x)) ** 2
        k = np.arange(psd.size)
        band = (k >= n // 1000) & (k <= n // 4)
        slopes.append(np.polyfit(np.log(k[band]), np.log(psd[band]), 1)[0])
    assert all(-1.3 <= s <= -0.7 for s in slopes), slopes


def test_white_psd_is_flat():
    n = 2**16
    psd = np.abs(np.fft.rfft(white_noise(n, 0))) ** 2
    k = np.arange(psd.size)
    band = (k >= n // 1000) & (k <= n // 4)
    assert abs(np.polyfit(np.log(k[band]), np.log(psd[band]), 1)[0]) < 0.1


def test_noise_matrix_columns_independent_streams():
    M = noise_matrix("white", 50, 3, 10)
    np.testing.assert_array_equal(M[:, 1], white_noise(50, 11))
    assert M.shape == (50, 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("white", -0.1)
    with pytest.raises(ValueError):
        NoiseSpec("brown", 0.1)
    assert NoiseSpec(mode="multiplicative").mode.value == "mult"


def test_zero_intensity_is_identity():
    clean = integrate(get_system("vdp"))
    noisy = corrupt(clean, NoiseSpec("pink", 0.0, "mult", 5))
    np.testing.assert_array_equal(noisy.states, clean.states)
    assert noisy.states is not clean.states


def test_multiplicative_formula_and_zero_component():
    t = np.linspace(0, 1, 20)
    x = np.column_stack([np.linspace(1, 2, 20), np.zeros(20)])
    noisy = corrupt(Trajectory(t, x), NoiseSpec("white", 0.1, "mult", 9))
    eps = noise_matrix("white", 20, 2, 9)
    np.testing.assert_allclose(noisy.states[:, 0], x[:, 0] * (1 + 0.1 * eps[:, 0]), rtol=1e-15)
    assert not noisy.states[:, 1].any()


def test_additive_scales_with_component_std():
    t = np.linspace(0, 1, 20)
    x = np.column_stack([np.linspace(1, 2, 20), np.full(20, 5.0)])
    noisy = corrupt(Trajectory(t, x), NoiseSpec("white", 0.1, "add", 9))
    eps = noise_matrix("white", 20, 2, 9)
    np.testing.assert_allclose(noisy.states[:, 0], x[:, 0] + 0.1 * x[:, 0].std() * eps[:, 0])
    # a constant component has zero spread, so additive noise leaves it alone
    np.testing.assert_array_equal(noisy.states[:, 1], 5.0)


def test_lorenz_relative_rms():
    clean = integrate(get_system("lorenz"))
    noisy = corrupt(clean, NoiseSpec("white", 0.1, "mult", 1))
    rel = np.sqrt(np.mean(((noisy.states - clean.states) / clean.states) ** 2, axis=0))
    assert np.all((rel > 0.07) & (rel < 0.13)), rel


def test_empty_trajectory():
    with pytest.raises(EmptyTrajectory):
        corrupt(Trajectory(np.empty(0), np.empty((0, 2))), NoiseSpec("white", 0.1))


def test_white_band_power_ratio():
    n = 2**16
    psd = np.abs(np.fft.rfft(white_noise(n, 5))) ** 2
    k = np.arange(psd.size)
    low = psd[(k >= n // 1000) & (k < n // 8)].mean()
    high = psd[(k >= n // 8) & (k <= n // 4)].mean()
    assert 0.8 < low / high < 1.25
