import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import P
from qdlink.measures import (
    EntanglementCurve,
    curve,
    decay_time_average,
    fit_fidelity,
    full_period_rho,
    model_counts,
    model_fidelity,
    noise_floor,
    pair_intensity,
    windowed_rho,
    write_fit_report,
)
from qdlink.qmath import bell_state, cascade_density, concurrence, fidelity_to_state
from qdlink.tomography import FULL_36, JAMES_16, CoincidenceHistogram, HistogramSet, expected_histograms

PHI_PLUS = bell_state("phi_plus")


def analytic(coherence=1.0, noise=0.0, scale=1e4, bin_width=8.0, delay_start=0.0, settings_=JAMES_16, t1=171.0):
    env = lambda t: np.where(t >= 0, scale * np.exp(-np.clip(t, 0, None) / t1), 0.0)
    rho = lambda t: cascade_density(max(t, 0.0), P, coherence=coherence)
    return expected_histograms(rho, env, settings_, P.t_rep_ps, bin_width, delay_start, noise)


def closed_form(t):
    return (1 + np.cos(P.omega * t)) / 2


def synthetic_curve(s=1e4, n=10.0, fss=2.1, t1=171.0, v=0.97, bin_width=8.0, start=-496.0, stop=3200.0):
    t = np.arange(start, stop, bin_width)
    pos = np.clip(t, 0, None)
    f = np.where(t >= 0, model_fidelity(pos, s, n, fss, t1, v), 0.25)
    counts = np.where(t >= 0, model_counts(pos, s, n, t1), n)
    valid = np.ones(len(t), bool)
    return EntanglementCurve(t, f, 1 - f, np.zeros(len(t)), counts, valid, bin_width, counts.copy())


class TestWindowedRho:
    def test_zero_delay_ideal(self):
        rho = windowed_rho(analytic(), 4.0, 8.0).rho
        assert fidelity_to_state(rho, PHI_PLUS) == pytest.approx(closed_form(4.0), abs=1e-6)

    def test_full_period_lower(self):
        hs = analytic(coherence=0.95, noise=2.0)
        f8 = fidelity_to_state(windowed_rho(hs, 4.0, 8.0).rho, PHI_PLUS)
        ffull = fidelity_to_state(full_period_rho(hs).rho, PHI_PLUS)
        assert ffull < f8

    def test_pure_noise(self):
        flat = HistogramSet([CoincidenceHistogram(s, 8.0, 0.0, np.full(410, 30)) for s in JAMES_16], P.t_rep_ps)
        assert concurrence(windowed_rho(flat, 4.0, 8.0).rho) <= 0.05

    def test_empty_window(self):
        with pytest.raises(ValueError):
            windowed_rho(analytic(), -100.0, 8.0)


class TestCurve:
    def test_tracks_closed_form(self):
        ec = curve(analytic(scale=1e5))
        ok = ec.valid
        rms = np.sqrt(np.mean((ec.f_phi_plus[ok] - closed_form(ec.centers[ok])) ** 2))
        assert rms < 0.02

    def test_anti_phase(self):
        ec = curve(analytic(coherence=0.97, noise=1.0, scale=1e5))
        ok = ec.valid
        r = np.corrcoef(ec.f_phi_plus[ok] - 0.25, ec.f_phi_minus[ok] - 0.25)[0, 1]
        assert r < -0.9

    def test_sum_rule_and_bounds(self):
        ec = curve(analytic(coherence=0.9, noise=5.0, scale=1e4))
        ok = ec.valid
        assert np.all(ec.f_phi_plus[ok] + ec.f_phi_minus[ok] <= 1 + 1e-9)
        for name in ("f_phi_plus", "f_phi_minus", "concurrence"):
            vals = ec.measure(name)[ok]
            assert np.all((vals >= -1e-9) & (vals <= 1 + 1e-9))

    def test_concurrence_above_fidelity_minima(self):
        ec = curve(analytic(coherence=0.98, scale=1e5))
        low = ec.valid & (ec.centers < 171.0)
        floor = min(np.nanmin(ec.f_phi_plus[low]), np.nanmin(ec.f_phi_minus[low]))
        assert np.all(ec.concurrence[low] > floor)

    def test_long_delay_decays_to_mixed(self):
        ec = curve(analytic(noise=200.0, scale=1e4), min_counts=1)
        late = ec.valid & (ec.centers >= 6 * 171.0)
        assert np.all(ec.concurrence[late] < 0.05)
        # residual pair fraction p pulls F by up to p/4, so look further out
        later = ec.valid & (ec.centers >= 8 * 171.0)
        np.testing.assert_allclose(ec.f_phi_plus[later], 0.25, atol=0.01)

    def test_invalid_bins(self):
        ec = curve(analytic(scale=100.0), min_counts=20)
        assert not ec.valid.all()
        assert np.all(np.isnan(ec.f_phi_plus[~ec.valid]))

    def test_rebinning(self):
        ec = curve(analytic(), bin_width=24.0)
        assert ec.bin_width == 24.0
        with pytest.raises(ValueError):
            curve(analytic(), bin_width=12.0)

    def test_intensity_state_independent(self):
        hs = analytic(scale=1e3)
        np.testing.assert_allclose(pair_intensity(hs)[:20], 1e3 * np.exp(-hs.centers[:20] / 171.0), rtol=1e-9)
        full = analytic(scale=1e3, settings_=FULL_36)
        np.testing.assert_allclose(pair_intensity(full), pair_intensity(hs), rtol=1e-9)

    def test_csv_roundtrip(self, tmp_path):
        ec = curve(analytic(scale=300.0))
        path = tmp_path / "curve.csv"
        ec.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("bin_center_ps,f_phi_plus,f_phi_minus,concurrence,counts")
        back = EntanglementCurve.read_csv(path)
        np.testing.assert_array_equal(back.valid, ec.valid)
        np.testing.assert_allclose(back.f_phi_plus[ec.valid], ec.f_phi_plus[ec.valid], atol=1e-8)
        assert back.bin_width == pytest.approx(8.0)


class TestDecayAverage:
    def test_constant(self):
        ec = synthetic_curve()
        ec.concurrence[:] = 0.73
        assert decay_time_average(ec) == pytest.approx(0.73)

    def test_ideal_cascade(self):
        assert decay_time_average(curve(analytic(scale=1e5))) == pytest.approx(1.0, abs=1e-6)

    def test_refinement_invariant(self):
        coarse = curve(analytic(coherence=0.95, noise=1.0, scale=1e5, bin_width=8.0))
        fine = curve(analytic(coherence=0.95, noise=1.0 / 4, scale=1e5 / 4, bin_width=2.0))
        for m in ("concurrence", "f_phi_plus"):
            assert decay_time_average(fine, m) == pytest.approx(decay_time_average(coarse, m), abs=1e-3)

    def test_no_valid_bins(self):
        ec = synthetic_curve()
        ec.valid[:] = False
        with pytest.raises(ValueError):
            decay_time_average(ec)

    def test_unknown_measure(self):
        with pytest.raises(ValueError):
            decay_time_average(synthetic_curve(), "negativity")


class TestModel:
    def test_limits(self):
        assert model_fidelity(0.0, 1e4, 0.0, 2.1, 171.0, 1.0) == pytest.approx(1.0)
        assert model_fidelity(P.t_p / 2, 1e4, 0.0, 2.1, 171.0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_noise_floor_limit(self):
        assert model_fidelity(1e5, 1e4, 10.0, 2.1, 171.0, 0.97) == pytest.approx(0.25, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1e4), st.floats(1, 1e6), st.floats(0, 1e3), st.floats(0.1, 10), st.floats(10, 1000), st.floats(0, 1))
    def test_range(self, t, s, n, fss, t1, v):
        f = model_fidelity(t, s, n, fss, t1, v)
        assert -1e-12 <= f <= 1 + 1e-12


class TestFit:
    def test_recovers_parameters(self):
        ec = synthetic_curve()
        fit = fit_fidelity(ec, guess={"fss": 2.0, "t1": 150.0, "v": 0.9})
        assert fit.converged and fit.n_fixed
        assert fit.n == pytest.approx(10.0)
        for name, truth in (("s", 1e4), ("fss", 2.1), ("t1", 171.0), ("v", 0.97)):
            assert getattr(fit, name) == pytest.approx(truth, rel=0.02)
        assert fit.period_ps == pytest.approx(1969.4, rel=1e-3)

    def test_residuals_unbiased(self):
        ec = synthetic_curve()
        fit = fit_fidelity(ec)
        ok = ec.centers >= 0
        assert abs(np.mean(ec.f_phi_plus[ok] - fit.fidelity(ec.centers[ok]))) < 0.005

    def test_free_noise_without_sideband(self):
        ec = synthetic_curve(start=4.0)
        assert noise_floor(ec) is None
        fit = fit_fidelity(ec)
        assert not fit.n_fixed
        assert fit.n == pytest.approx(10.0, rel=0.02)

    def test_analytic_period(self):
        ec = curve(analytic(coherence=0.97, noise=1.0, scale=1e5, delay_start=-496.0))
        fit = fit_fidelity(ec)
        assert fit.period_ps == pytest.approx(1970.0, rel=0.01)
        assert fit.fss == pytest.approx(2.1, rel=0.01)
        assert fit.t1 == pytest.approx(171.0, rel=0.02)

    def test_flags_parameters_at_bounds(self):
        assert fit_fidelity(synthetic_curve()).at_bound == ()
        flat = fit_fidelity(synthetic_curve(fss=1e-6, v=1.0))
        assert "fss" in flat.at_bound and "v" in flat.at_bound
        assert flat.to_json()["at_bound"] == list(flat.at_bound)

    def test_too_few_bins(self):
        ec = synthetic_curve(start=0.0, stop=80.0)
        with pytest.raises(ValueError, match="at least"):
            fit_fidelity(ec)

    def test_report(self, tmp_path):
        fit = fit_fidelity(synthetic_curve())
        write_fit_report(tmp_path / "fit.json", fit, {"scenario": "x"})
        doc = json.loads((tmp_path / "fit.json").read_text())
        assert doc["scenario"] == "x"
        assert set(doc["fit"]) >= {"s", "n", "fss", "t1", "v", "errors", "converged", "period_ps"}
