import math
import warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st

from isvs.theory import (
    GuardWarning,
    TheoryParams,
    contrast_sampling_se,
    evaluate_grid,
    exposure_integral,
    k2_isvs,
    k2_numerator_terms,
    k2_svs,
    photon_counts,
    siegert_convert,
    snr_isvs,
    snr_svs,
)
from isvs.field_dynamics import model_autocorrelation

FIG2 = dict(T=300.0, i_r=3000.0, alpha=1.0, read_var=8.0, nio=2000, r=1.0)


def quiet(fn, *a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuardWarning)
        return fn(*a, **kw)


def test_photon_counts_units():
    # 100 ph/(pixel ms) over 300 us
    assert photon_counts(100.0, 300.0) == pytest.approx(30.0)
    assert TheoryParams(tau_s=20, i_s=0.1, **FIG2).nst == pytest.approx(0.03)


def test_numerator_terms_hand_values():
    p = TheoryParams(tau_s=20, i_s=0.1, **FIG2)
    sample, cross, shot = quiet(k2_numerator_terms, p)
    assert sample == pytest.approx(1.2e-4, rel=1e-12)
    assert cross == pytest.approx(14.4, rel=1e-12)
    assert shot == pytest.approx(900.0, rel=1e-12)


def test_numerator_terms_without_reference():
    p = TheoryParams(tau_s=20, i_s=0.1, **{**FIG2, "i_r": 0.0})
    sample, cross, shot = quiet(k2_numerator_terms, p)
    assert cross == 0 and shot == 0 and sample > 0


@given(
    i_s=st.floats(0.01, 10), u_i=st.floats(10, 1e5), tau_s=st.floats(1, 20)
)
def test_sample_to_cross_ratio(i_s, u_i, tau_s):
    p = TheoryParams(tau_s=tau_s, i_s=i_s, **{**FIG2, "i_r": i_s * u_i})
    sample, cross, _ = quiet(k2_numerator_terms, p)
    expected = p.i_s * p.tau_s / (2 * p.i_r * p.tau_f)
    assert sample / cross == pytest.approx(expected, rel=1e-9)
    assert sample / cross < 0.1


def test_k2_isvs_low_signal_point():
    p = TheoryParams(tau_s=20, i_s=0.1, **FIG2)
    assert quiet(k2_isvs, p) == pytest.approx(1_024_888.9, abs=0.05)


def test_k2_isvs_noiseless_limit():
    p = TheoryParams(tau_s=20, i_s=1e9, **{**FIG2, "i_r": 1e13, "read_var": 0.0})
    assert quiet(k2_isvs, p) == pytest.approx(4 * p.u_i * p.tau_f / p.T, rel=1e-6)


def test_k2_svs_values():
    p = TheoryParams(tau_s=20, i_s=100, **FIG2)
    assert quiet(k2_svs, p) == pytest.approx(0.175556, abs=5e-7)
    noiseless = TheoryParams(tau_s=1e-9, i_s=100, **{**FIG2, "read_var": 0.0})
    assert quiet(k2_svs, noiseless) == pytest.approx(1 / 30, rel=1e-6)


@given(tau_s=st.floats(0.5, 15), i_s=st.floats(0.01, 1000), read_var=st.floats(0, 50))
def test_k2_equals_term_sums(tau_s, i_s, read_var):
    p = TheoryParams(tau_s=tau_s, i_s=i_s, **{**FIG2, "read_var": read_var})
    sample, cross, shot = quiet(k2_numerator_terms, p)
    assert quiet(k2_isvs, p, full=True) == pytest.approx((sample + cross + shot + read_var) / p.nst**2, rel=1e-12)
    assert quiet(k2_isvs, p) == pytest.approx((cross + shot + read_var) / p.nst**2, rel=1e-12)
    # SVS decomposition: sample term plus the sample-beam shot noise
    assert quiet(k2_svs, p) == pytest.approx((sample + p.nst + read_var) / p.nst**2, rel=1e-12)


def test_sampling_se_values():
    assert contrast_sampling_se(1.0, 1.0, 2000) == pytest.approx(0.0316228, abs=1e-7)
    assert contrast_sampling_se(2.0, 2.0, 2000) == pytest.approx(0.1, rel=1e-12)
    assert contrast_sampling_se(1.0, 1.0, 10**12) < 1e-5
    with pytest.raises(ValueError):
        contrast_sampling_se(1.0, 1.0, 1)
    with pytest.raises(ValueError):
        contrast_sampling_se(1.0, 0.5, 100)


def test_snr_golden_values():
    lo = TheoryParams(tau_s=20, i_s=0.1, **FIG2)
    hi = TheoryParams(tau_s=20, i_s=100, **FIG2)
    assert quiet(snr_isvs, lo) == pytest.approx(0.4937, rel=1e-3)
    assert quiet(snr_svs, lo) == pytest.approx(2.363e-4, rel=1e-3)
    assert quiet(snr_isvs, hi) == pytest.approx(29.75, rel=1e-3)
    assert quiet(snr_svs, hi) == pytest.approx(19.36, rel=1e-3)
    limit = TheoryParams(tau_s=20, i_s=1e12, **{**FIG2, "i_r": 1e16})
    assert quiet(snr_isvs, limit) == pytest.approx(math.sqrt(1000), rel=1e-6)
    assert quiet(snr_svs, limit) == pytest.approx(math.sqrt(1000), rel=1e-6)


def test_snr_tau_s_form_identical():
    p = TheoryParams(tau_s=7, i_s=3, **FIG2)
    assert quiet(snr_isvs, p, in_terms_of="tau_s") == pytest.approx(quiet(snr_isvs, p), rel=1e-14)
    with pytest.raises(ValueError):
        quiet(snr_isvs, p, in_terms_of="bogus")


def test_noiseless_snr_forms():
    p = TheoryParams(tau_s=10, i_s=1.0, **FIG2)
    # without camera noise only the shot term stays in the denominator
    assert quiet(snr_isvs, p, False) == pytest.approx(math.sqrt(1000) / (1 + p.T / (4 * p.tau_f) / p.nst))
    assert quiet(snr_svs, p, False) == pytest.approx(math.sqrt(1000) / (1 + p.T / p.tau_s / p.nst))


@given(
    tau_s=st.floats(0.5, 15),
    i_s=st.floats(0.01, 100),
    factor=st.floats(1.0, 10.0),
    r=st.floats(1.0, 3.0),
)
def test_snr_monotonicity(tau_s, i_s, factor, r):
    base = TheoryParams(tau_s=tau_s, i_s=i_s, **{**FIG2, "r": r})
    more_light = TheoryParams(tau_s=tau_s, i_s=i_s * factor, **{**FIG2, "i_r": 3000.0 * factor, "r": r})
    slower = TheoryParams(tau_s=tau_s * factor, i_s=i_s, **{**FIG2, "r": r})
    more_pixels = TheoryParams(tau_s=tau_s, i_s=i_s, **{**FIG2, "r": r, "nio": int(2000 * factor)})
    rougher = TheoryParams(tau_s=tau_s, i_s=i_s, **{**FIG2, "r": r * factor})
    for fn in (snr_isvs, snr_svs):
        s0 = quiet(fn, base)
        assert quiet(fn, more_light) >= s0 * (1 - 1e-12)
        assert quiet(fn, slower) >= s0 * (1 - 1e-12)
        assert quiet(fn, more_pixels) >= s0 * (1 - 1e-12)
    assert quiet(snr_isvs, rougher) <= quiet(snr_isvs, base) * (1 + 1e-12)


def test_convergence_at_high_flux():
    p = TheoryParams(tau_s=10, i_s=1e12, **{**FIG2, "i_r": 1e16})
    a, b = quiet(snr_isvs, p), quiet(snr_svs, p)
    assert abs(a - b) / b < 1e-6


def test_speckled_uniform_ratio():
    p1 = TheoryParams(tau_s=10, i_s=1, **FIG2)
    p2 = TheoryParams(tau_s=10, i_s=1, **{**FIG2, "r": 2.0})
    assert quiet(snr_isvs, p2) / quiet(snr_isvs, p1) == pytest.approx(math.sqrt(2 / 5), rel=1e-12)


def test_experimental_r_difference():
    a = TheoryParams(tau_s=10, i_s=1, **{**FIG2, "r": 1.5})
    b = TheoryParams(tau_s=10, i_s=1, **{**FIG2, "r": 1.9})
    diff = 1 - quiet(snr_isvs, b) / quiet(snr_isvs, a)
    assert diff == pytest.approx(1 - math.sqrt(3.5 / 4.7), rel=1e-12)
    assert diff == pytest.approx(0.137, abs=1e-3)


def test_siegert():
    assert siegert_convert(40, "field_to_intensity") == 20
    assert siegert_convert(20, "intensity_to_field") == 40
    assert siegert_convert(siegert_convert(13.7, "field_to_intensity"), "intensity_to_field") == pytest.approx(13.7)
    with pytest.raises(ValueError):
        siegert_convert(-1, "field_to_intensity")
    with pytest.raises(ValueError):
        siegert_convert(1, "sideways")


@given(t=st.floats(0, 200), tau_s=st.floats(0.5, 50))
def test_g2_model_is_g1_squared(t, tau_s):
    assert model_autocorrelation(t, tau_s) == pytest.approx(model_autocorrelation(t, 2 * tau_s) ** 2, rel=1e-12)


def test_guards_warn_not_fail():
    p = TheoryParams(tau_s=20, i_s=1000, **FIG2)
    with pytest.warns(GuardWarning):
        snr_isvs(p)
    assert set(p.guard_violations("isvs")) == {
        "T=300 us < 10*tau_field=400 us",
        "U_I=3 < 10",
    }
    assert p.guard_violations("svs") == ["T=300 us < 10*tau_field=400 us"]


def test_params_validation():
    with pytest.raises(ValueError):
        TheoryParams(tau_s=0, T=300, i_s=1)
    with pytest.raises(ValueError):
        TheoryParams(tau_s=1, T=300, i_s=1, r=0.5)
    with pytest.raises(ValueError):
        TheoryParams(tau_s=1, T=300, i_s=-1)


def test_exposure_integral_limit():
    assert exposure_integral(5.0, 300.0) == 10.0
    assert exposure_integral(5.0, 1e7, finite_exposure=True) == pytest.approx(10.0, rel=1e-5)
    # x = T/tau = 1: 2 tau (1 - (1 - e^-1))
    assert exposure_integral(5.0, 5.0, finite_exposure=True) == pytest.approx(10.0 * math.exp(-1))


def test_evaluate_grid_rows_sorted_and_svs_deduplicated():
    rows = evaluate_grid([20, 3], [100, 0.1], ["svs", "isvs"], [2.0, 1.0], **{k: v for k, v in FIG2.items() if k != "r"})
    keys = [(r.method, r.params.i_s, r.params.tau_s, r.params.r) for r in rows]
    assert keys == sorted(keys)
    assert sum(r.method == "isvs" for r in rows) == 8
    svs = [r for r in rows if r.method == "svs"]
    assert len(svs) == 4 and all(r.params.i_r == 0 and r.params.r == 1 for r in svs)
    assert all(r.guards for r in rows if r.params.tau_s == 20)
