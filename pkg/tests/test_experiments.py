import math
import warnings

import numpy as np
import pytest
from scipy.linalg import expm

from rydcav import experiments as ex
from rydcav.errors import ConvergenceError
from rydcav.experiments import (
    BoundaryWarning,
    FitWarning,
    SweepResult,
    cooled_cavity,
    cooled_spectroscopy,
    cooling_trace,
    count_oscillations,
    detuning_map,
    exp_model,
    fit_exponential,
    multiatom_scan,
    optimize_cooling,
    pulse_transfer,
    relaxation_time,
    spectral_peak,
    spectroscopy_map,
    steady_cell,
    t_eff,
    teff_map,
)
from rydcav.model import SystemSpec, mhz
from rydcav.operators import thermal_state

pytestmark = pytest.mark.filterwarnings("ignore::rydcav.operators.TruncationWarning")

H_OVER_KB_REF = 4.799243073e-11  # K s, from CODATA h and k_B


def small_cool(**kw):
    base = dict(scheme="cool", n_max=8, temperature=1.0, q_factor=2e4,
                delta=mhz(14.5), delta_prime=mhz(17.6))
    base.update(kw)
    return SystemSpec(**base)


class TestEffectiveTemperature:
    @pytest.mark.parametrize("temperature", [0.5, 1.0, 4.0, 10.0])
    def test_thermal_round_trip(self, temperature):
        omega_c = 2 * math.pi * 15_000.0
        n_bar = 1.0 / math.expm1(H_OVER_KB_REF * 15e9 / temperature)
        p_vac = thermal_state(400, n_bar).diag()[0]
        assert t_eff(p_vac, omega_c) == pytest.approx(temperature, rel=1e-9)

    def test_closed_form(self):
        p = 0.3
        expected = H_OVER_KB_REF * 15e9 / -math.log(1 - p)
        assert t_eff(p, 2 * math.pi * 15_000.0) == pytest.approx(expected, rel=1e-9)

    def test_monotone_decreasing_in_vacuum_weight(self):
        ps = np.linspace(0.01, 0.99, 50)
        temps = [t_eff(p, mhz(15_000)) for p in ps]
        assert np.all(np.diff(temps) < 0)

    def test_edges(self):
        assert t_eff(1.0, mhz(15_000)) == 0.0
        with pytest.warns(RuntimeWarning):
            assert t_eff(0.0, mhz(15_000)) == math.inf

    @pytest.mark.parametrize("p", [-0.1, 1.1, float("nan")])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            t_eff(p, mhz(15_000))


def lambda_closed_transfer(delta, g, omega):
    """Pulse transfer in the closed three-state chain |g,0> - |s,0> - |p,1>."""
    H = np.array([[0.0, omega / 2, 0.0],
                  [omega / 2, -delta, g],
                  [0.0, g, -delta]])
    U = expm(-1j * H * math.pi / omega)
    return 1.0 - abs(U[0, 0]) ** 2


class TestSpectroscopy:
    def lossless(self, **kw):
        base = dict(scheme="lambda", omega_drive=mhz(2.0), gamma_s=0.0, gamma_p=0.0,
                    q_factor=1e30, temperature=0.0, n_max=3)
        base.update(kw)
        return SystemSpec(**base)

    @pytest.mark.parametrize("delta_mhz", [-6.0, -3.84, 0.0, 2.5, 4.0])
    def test_vacuum_lambda_matches_three_state_chain(self, delta_mhz):
        spec = self.lossless()
        got = pulse_transfer(spec, mhz(delta_mhz))
        assert got == pytest.approx(lambda_closed_transfer(mhz(delta_mhz), spec.g, spec.omega_drive), abs=1e-6)

    def test_zero_drive_gives_zero_rows(self):
        spec = self.lossless(omega_drive=0.0)
        res = spectroscopy_map(spec, [mhz(-1), 0.0, mhz(1)], "temperature", [0.0, 4.0])
        np.testing.assert_array_equal(res.values, 0.0)

    def test_needs_probe_scheme(self):
        with pytest.raises(ValueError):
            pulse_transfer(SystemSpec(scheme="cool", n_max=3), 0.0)

    def test_axes_and_shape(self):
        spec = self.lossless(n_max=None, gamma_s=1 / 289, gamma_p=1 / 689, q_factor=1e5)
        res = spectroscopy_map(spec, [0.0, mhz(4)], "q_factor", [1e4, 1e5])
        assert res.axis_names == ["delta", "q_factor"]
        assert res.values.shape == (2, 2)
        assert np.all((res.values >= -1e-9) & (res.values <= 1 + 1e-9))

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            spectroscopy_map(self.lossless(), [0.0], "g", [1.0])


class TestCooling:
    def test_uncoupled_cavity_stays_thermal(self):
        spec = small_cool(g=0.0, n_max=30)
        ts = cooling_trace(spec, 2.0, 11)
        np.testing.assert_allclose(ts["n"], ts["n"][0], atol=1e-8)
        assert ts["n"][0] == pytest.approx(spec.n_th, abs=1e-3)

    def test_cold_start_stays_nearly_empty(self):
        ts = cooling_trace(small_cool(temperature=0.0, n_max=4), 5.0, 26)
        assert np.max(ts["n"]) < 0.1

    def test_cooling_lowers_photon_number(self):
        ts = cooling_trace(small_cool(n_max=10), 20.0, 21)
        assert ts["n"][-1] < ts["n"][0]

    def test_requires_cool_scheme(self):
        with pytest.raises(ValueError):
            cooling_trace(SystemSpec(scheme="lambda", n_max=3), 1.0)

    def test_relaxation_time_of_exponential(self):
        t = np.linspace(0, 10, 2001)
        tau = 1.7
        # the total change is measured to the last sample, not to t -> inf
        covered = (1 - math.exp(-1)) * (1 - math.exp(-10 / tau))
        expected = -tau * math.log(1 - covered)
        assert relaxation_time(t, 5 - 3 * np.exp(-t / tau)) == pytest.approx(expected, rel=1e-5)
        assert relaxation_time(t, np.ones_like(t)) == 0.0


class TestSteadySweeps:
    def test_uncoupled_column_reports_bath_temperature(self):
        spec = small_cool(n_max=30)
        res = teff_map(spec, "g", [0.0, mhz(4)], "temperature", [0.5, 1.0])
        np.testing.assert_allclose(res.values[0], [0.5, 1.0], rtol=1e-6)
        assert np.all(res.values[1] < res.values[0])

    def test_cells_match_single_solves(self):
        spec = small_cool()
        res = teff_map(spec, "q_factor", [1e4, 3e4], "omega_drive", [mhz(5), mhz(12)])
        for (q, om), value in res.cells():
            cell = steady_cell(spec.with_(q_factor=q, omega_drive=om, omega_dress=om))
            assert value == cell["t_eff"]

    def test_failed_cells_are_nan_and_listed(self, monkeypatch):
        real = ex.steadystate

        def flaky(model, *a, **k):
            if model.spec.temperature > 0.9:
                raise ConvergenceError("forced", {})
            return real(model, *a, **k)

        monkeypatch.setattr(ex, "steadystate", flaky)
        res = teff_map(small_cool(), "g", [mhz(4)], "temperature", [0.5, 1.0], jobs=1)
        assert np.isfinite(res.values[0, 0]) and np.isnan(res.values[0, 1])
        assert res.metadata["missing"][0]["index"] == [0, 1]

    def test_parallel_matches_serial(self):
        spec = small_cool(n_max=6)
        args = (spec, [-mhz(2), 0.0, mhz(2)], [0.0, mhz(1)])
        serial = detuning_map(*args, jobs=1)
        parallel = detuning_map(*args, jobs=2)
        np.testing.assert_array_equal(serial.values, parallel.values)

    def test_bad_axes(self):
        with pytest.raises(ValueError):
            teff_map(small_cool(), "temperature", [1.0], "g", [1.0])

    def test_sweep_shape_checked(self):
        with pytest.raises(ValueError):
            SweepResult({"a": [1, 2]}, np.zeros(3))

    def test_steady_photon_distribution_is_not_thermal(self):
        res, cavity = cooled_cavity(small_cool(n_max=20))
        p = cavity.diag()
        ratios = p[1:4] / p[:3]
        assert np.ptp(ratios) > 1e-3 * ratios.mean()
        np.testing.assert_allclose(p, res.photon_dist, atol=1e-12)


class TestOptimizer:
    def test_degenerate_box_returns_the_point(self):
        spec = small_cool(n_max=6)
        point = mhz(7.0)
        res = optimize_cooling(spec, ((point, point), (point, point)))
        assert res.omega_drive == pytest.approx(point) and res.omega_dress == pytest.approx(point)
        assert res.n_mean == steady_cell(spec.with_(omega_drive=point, omega_dress=point))["n_mean"]

    def test_boundary_warning(self):
        spec = small_cool(n_max=6)
        with pytest.warns(BoundaryWarning):
            res = optimize_cooling(spec, ((mhz(1), mhz(2)), (mhz(1), mhz(2))), grid_points=3)
        assert res.at_boundary

    def test_improves_on_grid(self):
        spec = small_cool(n_max=6)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            res = optimize_cooling(spec, ((mhz(2), mhz(30)), (mhz(2), mhz(30))), grid_points=4)
        assert res.n_mean <= np.nanmin(res.grid.values) + 1e-12

    def test_rejects_bad_objective_and_bounds(self):
        with pytest.raises(ValueError):
            optimize_cooling(small_cool(), objective="speed")
        with pytest.raises(ValueError):
            optimize_cooling(small_cool(), ((mhz(5), mhz(1)), (mhz(1), mhz(5))))


class TestCooledProtocols:
    def test_zero_kelvin_column_matches_plain_lambda(self):
        spec = small_cool(n_max=12)
        deltas = [-mhz(3), 0.0, mhz(2)]
        res = cooled_spectroscopy(spec, deltas)
        probe = spec.with_(scheme="lambda", omega_dress=0.0, delta_prime=0.0, temperature=0.0,
                           omega_drive=0.5 * spec.g)
        plain = spectroscopy_map(probe, deltas, "temperature", [0.0])
        np.testing.assert_allclose(res.values[:, 0], plain.values[:, 0], atol=1e-7)
        assert list(res.axes["cavity"]) == ["zero_k", "cooled", "thermal"]

    def test_spectral_peak_of_damped_cosine(self):
        t = np.linspace(0, 2, 801)
        w = 2 * math.pi * 8.0
        peak, fraction = spectral_peak(t, 0.5 + 0.4 * np.cos(w * t) * np.exp(-t))
        assert peak == pytest.approx(w, rel=0.01)
        assert fraction > 0.8

    def test_count_oscillations(self):
        t = np.linspace(0, 1, 1001)
        assert count_oscillations(0.5 + 0.5 * np.cos(2 * math.pi * 5 * t)) == 4
        assert count_oscillations(np.exp(-t)) == 0

    def test_spectral_peak_needs_uniform_grid(self):
        with pytest.raises(ValueError):
            spectral_peak([0, 1, 3], [0, 1, 0])


class TestFit:
    @pytest.mark.parametrize("params", [(0.43, 1.56, 0.89), (0.22, 0.20, 0.81)])
    def test_round_trip(self, params):
        n = np.arange(1, 9)
        res = fit_exponential(n, exp_model(n, *params))
        np.testing.assert_allclose([res.t_inf, res.alpha, res.n_c], params, atol=1e-6)
        assert res.residual_norm < 1e-10
        assert res.covariance.shape == (3, 3)

    def test_three_points_exact(self):
        n = np.array([1, 2, 3])
        res = fit_exponential(n, exp_model(n, 0.4, 1.5, 0.9))
        np.testing.assert_allclose(res.predict(n), exp_model(n, 0.4, 1.5, 0.9), atol=1e-9)
        np.testing.assert_array_equal(res.covariance, 0.0)

    def test_constant_data_flags_rank_deficiency(self):
        n = np.arange(1, 6)
        with pytest.warns(FitWarning):
            res = fit_exponential(n, np.full(5, 0.7))
        assert res.rank_deficient
        np.testing.assert_allclose(res.predict(n), 0.7, atol=1e-9)

    @pytest.mark.parametrize("n,y", [([1, 2], [1.0, 0.5]), ([1, 2, 3], [1.0, 0.5]),
                                     ([1, 2, 3], [1.0, float("nan"), 0.3])])
    def test_bad_input(self, n, y):
        with pytest.raises(ValueError):
            fit_exponential(n, y)


class TestMultiatom:
    def test_fixed_cutoff_scan(self):
        spec = small_cool(n_max=4)
        res = multiatom_scan(spec, [1, 2], converge=False)
        assert res.metadata["n_max"] == [4, 4]
        assert res.values[1] < res.values[0]

    def test_dimension_cap_is_raised(self):
        from rydcav.errors import DimensionCapError

        with pytest.raises(DimensionCapError):
            multiatom_scan(small_cool(n_max=10), [3], converge=False, dim_cap=100)

    def test_rejects_empty_grid(self):
        with pytest.raises(ValueError):
            multiatom_scan(small_cool(), [])
