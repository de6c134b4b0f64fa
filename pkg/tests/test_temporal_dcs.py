import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isvs._seeding import derive_rng
from isvs.field_dynamics import DynamicsParams, gen_dynamic_field
from isvs.temporal_dcs import (
    AutocorrCurve,
    DegenerateCurveError,
    FitError,
    autocorrelate_field,
    autocorrelate_intensity,
    fit_exponential,
    write_curve_csv,
)


def synthetic(tau=20.0, beta=1.0, base=1.0, n=60, dt=1.0):
    t = dt * np.arange(n)
    return AutocorrCurve(t, base + beta * np.exp(-t / tau), np.full(n, 1000))


@pytest.fixture(scope="module")
def speckle():
    # tau_field = 40 us, dt = 4 us
    return gen_dynamic_field(DynamicsParams(40.0, 4.0, 4000, 200, seed=21))


def test_constant_series():
    c = autocorrelate_intensity(np.full(500, 3.0), 1.0, 10.0)
    assert np.allclose(c.g2_values, 1.0)
    assert c.lags[0] == 0 and np.all(np.diff(c.lags) > 0)


def test_lagged_products_match_direct_sum():
    x = derive_rng(0).random(200) + 1
    c = autocorrelate_intensity(x, 1.0, 5.0)
    direct = [np.mean(x[: x.size - k] * x[k:]) / x.mean() ** 2 for k in range(6)]
    assert np.allclose(c.g2_values, direct, rtol=1e-12)
    assert list(c.n_samples) == [200 - k for k in range(6)]


def test_input_validation():
    with pytest.raises(ValueError, match="too short"):
        autocorrelate_intensity(np.ones(50), 1.0, 10.0)
    with pytest.raises(ValueError):
        autocorrelate_intensity(np.ones(50), 1.0, 0.5)
    with pytest.raises(ValueError, match="zero-mean"):
        autocorrelate_intensity(np.zeros(500), 1.0, 10.0)
    with pytest.raises(ValueError):
        autocorrelate_field(np.ones((100, 2), dtype=complex), 4.0)


def test_intensity_g2_matches_siegert_prediction(speckle):
    c = autocorrelate_intensity(speckle.intensity().T, 4.0, 120.0)
    model = np.exp(-c.lags / 20.0)
    assert np.all(np.abs(c.g2_values - 1 - model) < 3 * c.se)
    assert c.g2_values[0] - 1 == pytest.approx(1.0, abs=3 * c.se[0])
    assert c.g2_values[0] == c.g2_values.max()


def test_field_g1(speckle):
    g1 = autocorrelate_field(speckle, 120.0)
    assert g1.g1_values[0] == pytest.approx(1.0, abs=1e-12)
    k = int(np.argmin(np.abs(g1.lags - 40.0)))
    assert abs(abs(g1.g1_values[k]) - math.exp(-1)) < 3 * g1.se[k]


def test_siegert_overlay(speckle):
    g1 = autocorrelate_field(speckle, 120.0)
    g2 = autocorrelate_intensity(speckle.intensity().T, 4.0, 120.0)
    diff = np.abs(g1.g1_values) ** 2 - (g2.g2_values - 1)
    assert np.all(np.abs(diff[1:]) < 3 * g2.se[1:])


def test_time_reversal_symmetry():
    x = derive_rng(4).random(300) + 0.5
    a = autocorrelate_intensity(x, 1.0, 20.0)
    b = autocorrelate_intensity(x[::-1], 1.0, 20.0)
    assert np.allclose(a.g2_values, b.g2_values, rtol=1e-12)


def test_fit_noiseless_curve():
    fit = fit_exponential(synthetic())
    assert fit.tau_hat == pytest.approx(20.0, rel=1e-6)
    assert fit.beta_hat == pytest.approx(1.0, rel=1e-6)
    assert fit.baseline == pytest.approx(1.0, rel=1e-6)
    assert fit.rms_residual < 1e-8


@given(tau=st.floats(3, 40), beta=st.floats(0.05, 2), base=st.floats(0.5, 2))
def test_fit_recovers_in_model_curves(tau, beta, base):
    fit = fit_exponential(synthetic(tau, beta, base, n=200, dt=tau / 10))
    assert fit.tau_hat == pytest.approx(tau, rel=1e-6)
    assert fit.rms_residual < 1e-8


def test_fit_flat_curve_is_degenerate():
    with pytest.raises(DegenerateCurveError):
        fit_exponential(synthetic(beta=0.0))
    with pytest.raises(ValueError):
        fit_exponential(synthetic(n=4))


def test_fit_iteration_cap():
    noisy = synthetic(n=200)
    g = noisy.g2_values + derive_rng(1).normal(0, 0.05, 200)
    with pytest.raises(FitError):
        fit_exponential(AutocorrCurve(noisy.lags, g, noisy.n_samples), max_nfev=1)


def test_fit_on_ar1_series():
    # tau_s = 20 us; 1e6 steps split across independent pixels
    seq = gen_dynamic_field(DynamicsParams(40.0, 4.0, 10_000, 100, seed=8))
    c = autocorrelate_intensity(seq.intensity().T, 4.0, 160.0)
    assert fit_exponential(c).tau_hat == pytest.approx(20.0, rel=0.05)


def test_estimator_bias_shrinks_with_length():
    errors = []
    for n_steps in (500, 2000, 8000):
        taus = []
        for s in range(8):
            seq = gen_dynamic_field(DynamicsParams(40.0, 4.0, n_steps, 20, seed=100 + s))
            taus.append(fit_exponential(autocorrelate_intensity(seq.intensity().T, 4.0, 40.0)).tau_hat)
        errors.append(abs(np.mean(taus) - 20.0))
    assert errors[-1] < errors[0]
    assert errors[-1] < 1.0


def test_write_curve_csv(tmp_path):
    path = tmp_path / "c.csv"
    write_curve_csv(synthetic(n=6), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "lag_us,g2" and lines[1] == "0,2"
    assert len(lines) == 7
