import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downgen.metrics import (
    HEAT_ADVISORY_LEVELS,
    heat_advisory_exceedance,
    heat_index,
    heat_streak_prob,
    mab,
    percentile_mae,
    relative_humidity,
    saturation_vapor_pressure,
    spatial_corr_error,
    correlation_matrix,
    surface_pressure,
    temporal_psd,
    temporal_psd_error,
    wasserstein1,
)


def noaa_regression_oracle(tf, rh):
    """Independently coded NOAA heat-index regression (Fahrenheit in/out)."""
    hi = (-42.379 + 2.04901523 * tf + 10.14333127 * rh - 0.22475541 * tf * rh
          - 0.00683787 * tf * tf - 0.05481717 * rh * rh + 0.00122874 * tf * tf * rh
          + 0.00085282 * tf * rh * rh - 0.00000199 * tf * tf * rh * rh)
    if rh < 13 and 80 < tf < 112:
        hi -= (13 - rh) / 4 * ((17 - abs(tf - 95)) / 17) ** 0.5
    elif rh > 85 and 80 < tf < 87:
        hi += (rh - 85) * (87 - tf) / 50
    if hi < 80:
        hi = 0.5 * (tf + 61.0 + (tf - 68.0) * 1.2 + 0.094 * rh)
    return hi


class TestSurfacePressure:
    def test_sea_level_identity(self):
        assert surface_pressure(101325.0, 288.15, 0.0) == 101325.0

    def test_standard_atmosphere_value(self):
        # frozen from an independent evaluation of the closed form
        assert surface_pressure(101325.0, 288.15, 1000.0) == pytest.approx(
            90124.27796536457, abs=1e-6)

    def test_monotone_decreasing_in_elevation(self):
        z = np.linspace(0.0, 3000.0, 50)
        p = surface_pressure(101325.0, 288.15, z)
        assert (np.diff(p) < 0).all()

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            surface_pressure(101325.0, -1.0, 100.0)


class TestRelativeHumidity:
    def test_saturation_pressure_at_freezing(self):
        assert saturation_vapor_pressure(273.15) == pytest.approx(6.112, abs=1e-12)

    def test_zero_humidity(self):
        assert relative_humidity(0.0, 290.0, 101325.0) == 0.0

    def test_saturated_q_gives_100_percent(self):
        # q chosen analytically so e == e_s at T=293.15 K, P=1013.25 hPa
        q = 0.014471898286141411
        rh = relative_humidity(q, 293.15, 101325.0)
        assert abs(rh - 100.0) < 1e-9

    def test_clip_for_reporting(self):
        q = 0.02
        raw = relative_humidity(q, 293.15, 101325.0)
        assert raw > 100.0
        assert relative_humidity(q, 293.15, 101325.0, clip=True) == 100.0

    def test_domain_violations(self):
        with pytest.raises(ValueError):
            relative_humidity(-0.1, 290.0, 101325.0)
        with pytest.raises(ValueError):
            relative_humidity(0.01, 20.0, 101325.0)


class TestHeatIndex:
    def test_simple_branch_value(self):
        t_k = (70.0 - 32.0) / 1.8 + 273.15
        hi = heat_index(t_k, 50.0)
        assert hi == pytest.approx(293.7333333333333, abs=1e-9)  # 69.05 F

    def test_matches_independent_oracle_on_grid(self):
        # grid points sit off the formula's branch boundaries (T=80/87 F,
        # RH=85%), where the published adjustments jump and the K<->F round
        # trip makes strict comparisons rounding-sensitive
        tf_grid = np.arange(80.5, 110.1, 1.5)
        rh_grid = np.arange(40.0, 100.1, 4.0)
        worst = 0.0
        for tf in tf_grid:
            for rh in rh_grid:
                t_k = (tf - 32.0) / 1.8 + 273.15
                got_f = (heat_index(t_k, rh) - 273.15) * 1.8 + 32.0
                worst = max(worst, abs(got_f - noaa_regression_oracle(tf, rh)))
        assert worst < 1.5

    def test_simple_branch_selected_when_regression_below_80(self):
        t_k = (75.0 - 32.0) / 1.8 + 273.15
        got_f = (heat_index(t_k, 50.0) - 273.15) * 1.8 + 32.0
        assert got_f == pytest.approx(noaa_regression_oracle(75.0, 50.0), abs=1e-9)
        assert got_f < 80.0

    def test_monotone_in_temperature_at_fixed_rh(self):
        tf = np.arange(80.0, 110.1, 1.0)
        t_k = (tf - 32.0) / 1.8 + 273.15
        for rh in (40.0, 60.0, 80.0, 100.0):
            hi = heat_index(t_k, np.full_like(t_k, rh))
            assert (np.diff(hi) > 0).all()

    def test_advisory_levels(self):
        assert HEAT_ADVISORY_LEVELS["danger"] == 312.6
        hi = np.array([299.0, 301.0, 306.0, 313.0, 326.0])
        assert heat_advisory_exceedance(hi, "caution") == pytest.approx(4 / 5)
        assert heat_advisory_exceedance(hi, "danger") == pytest.approx(2 / 5)

    def test_rh_domain(self):
        with pytest.raises(ValueError):
            heat_index(300.0, 150.0)


class TestMab:
    def test_identical_sets(self):
        x = np.random.default_rng(0).standard_normal((20, 4, 4))
        assert mab(x, x.copy()) == 0.0

    def test_constant_shift(self):
        x = np.random.default_rng(1).standard_normal((50, 3, 3))
        assert mab(x + 2.0, x) == pytest.approx(2.0, abs=1e-12)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((30, 2, 5))
        b = rng.standard_normal((40, 2, 5))
        oracle = np.abs(a.reshape(30, -1).mean(0) - b.reshape(40, -1).mean(0)).mean()
        assert mab(a, b) == pytest.approx(oracle, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mab(np.zeros((0, 2)), np.zeros((3, 2)))


class TestWasserstein:
    def test_identical_samples(self):
        x = np.random.default_rng(3).standard_normal((100, 3))
        assert wasserstein1(x, x.copy()) == 0.0

    def test_point_masses(self):
        assert wasserstein1(np.zeros(5), np.ones(5)) == pytest.approx(1.0, abs=1e-12)

    def test_sorted_quantile_oracle_equal_sizes(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal(200)
        b = 0.5 + 1.3 * rng.standard_normal(200)
        oracle = np.abs(np.sort(a) - np.sort(b)).mean()
        assert abs(wasserstein1(a, b) - oracle) < 1e-9

    def test_unequal_sizes_against_scipy_style_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal(64)
        b = rng.standard_normal(37) + 0.3
        # quantile-function integral oracle on a fine probability grid
        ps = (np.arange(100000) + 0.5) / 100000
        qa = np.quantile(a, ps, method="inverted_cdf")
        qb = np.quantile(b, ps, method="inverted_cdf")
        oracle = np.abs(qa - qb).mean()
        assert abs(wasserstein1(a, b) - oracle) < 1e-3

    @given(st.floats(-5.0, 5.0))
    @settings(max_examples=25, deadline=None)
    def test_translation_covariance(self, c):
        rng = np.random.default_rng(6)
        a = rng.standard_normal(50)
        b = rng.standard_normal(60)
        assert abs(wasserstein1(a + c, b + c) - wasserstein1(a, b)) < 1e-12

    def test_metric_axioms_on_random_triples(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a, b, c = (rng.standard_normal(40) for _ in range(3))
            dab = wasserstein1(a, b)
            dba = wasserstein1(b, a)
            assert dab >= 0
            assert abs(dab - dba) < 1e-12
            assert dab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-12


class TestPercentile:
    def test_identical(self):
        x = np.random.default_rng(8).standard_normal((50, 4))
        assert percentile_mae(x, x.copy(), 99.0) == 0.0

    @pytest.mark.parametrize("p", [5.0, 50.0, 99.0])
    def test_shift_by_constant(self, p):
        x = np.random.default_rng(9).standard_normal((200, 3))
        assert percentile_mae(x + 1.5, x, p) == pytest.approx(1.5, abs=1e-12)

    def test_direct_oracle(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((77, 2))
        b = rng.standard_normal((88, 2))
        oracle = np.abs(np.percentile(a, 90.0, axis=0)
                        - np.percentile(b, 90.0, axis=0)).mean()
        assert percentile_mae(a, b, 90.0) == pytest.approx(oracle, abs=1e-12)

    def test_bad_percentile(self):
        with pytest.raises(ValueError):
            percentile_mae(np.zeros((3, 1)), np.zeros((3, 1)), 0.0)


class TestSpatialCorr:
    def test_identical_maps_zero_error(self):
        x = np.random.default_rng(11).standard_normal((30, 7, 7))
        assert spatial_corr_error(x, x.copy(), (3, 3), 2) == 0.0

    def test_center_entry_exactly_one(self):
        x = np.random.default_rng(12).standard_normal((25, 5, 5))
        mat = correlation_matrix(x, (2, 2), 1)
        assert mat[1, 1] == 1.0
        assert np.nanmax(np.abs(mat)) <= 1.0 + 1e-12

    def test_hand_computed_three_by_three(self):
        t = 6
        x = np.zeros((t, 3, 3))
        base = np.array([1.0, 2.0, 0.5, -1.0, 0.25, 3.0])
        for i in range(3):
            for j in range(3):
                x[:, i, j] = (i + 1) * base + j * np.arange(t)
        mat = correlation_matrix(x, (1, 1), 1)

        def pearson(a, b):
            a = a - a.mean()
            b = b - b.mean()
            return (a * b).sum() / np.sqrt((a ** 2).sum() * (b ** 2).sum())

        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                expect = pearson(x[:, 1, 1], x[:, 1 + di, 1 + dj])
                assert mat[1 + di, 1 + dj] == pytest.approx(expect, abs=1e-12)

    def test_zero_variance_excluded_with_warning(self):
        x = np.random.default_rng(13).standard_normal((20, 3, 3))
        y = x.copy()
        y[:, 0, 0] = 5.0  # constant neighbor in the reference map
        with pytest.warns(UserWarning, match="zero-variance"):
            err = spatial_corr_error(x, y, (1, 1), 1)
        assert np.isfinite(err)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            correlation_matrix(np.zeros((2, 3, 3)), (1, 1), 1)


class TestTemporalPsd:
    def test_identical_zero_error(self):
        x = np.random.default_rng(14).standard_normal((4, 128))
        assert temporal_psd_error(x, x.copy(), 128.0) == 0.0

    def test_sinusoid_peak_bin(self):
        t = 128
        k0 = 7
        x = np.sin(2 * np.pi * k0 * np.arange(t) / t)
        spec = temporal_psd(x, float(t))
        # DFT oracle: all energy in bin k0 (index k0-1 after dropping DC)
        assert spec.argmax() == k0 - 1
        others = np.delete(spec, k0 - 1)
        assert others.max() < 1e-20 * spec.max() + 1e-12

    def test_white_noise_ensembles_small_error(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((1000, 64))
        b = rng.standard_normal((1000, 64))
        assert temporal_psd_error(a, b, 64.0) < 0.2

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            temporal_psd_error(np.zeros((2, 10)), np.zeros((2, 12)), 10.0)


class TestHeatStreak:
    def test_all_below_threshold(self):
        assert heat_streak_prob(np.zeros(10), 0.0, 3, 1.0) == 0.0

    def test_single_run_of_exactly_h(self):
        tmax = np.zeros(10)
        tmax[4:7] = 5.0
        assert heat_streak_prob(tmax, 0.0, 3, 1.0) == pytest.approx(3 / 10)

    def test_overlapping_runs_unique_days(self):
        tmax = np.zeros(10)
        tmax[1:5] = 5.0  # days 1-4 above: windows (1,2,3) and (2,3,4)
        assert heat_streak_prob(tmax, 0.0, 3, 1.0) == pytest.approx(4 / 10)

    def test_h_one_is_exceedance_frequency(self):
        rng = np.random.default_rng(16)
        tmax = rng.standard_normal(500)
        p = heat_streak_prob(tmax, 0.0, 1, 0.5)
        assert p == pytest.approx((tmax > 0.5).mean())

    @given(st.integers(1, 5), st.integers(0, 2 ** 20 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_enumeration(self, h, bits):
        exceed = np.array([(bits >> k) & 1 for k in range(20)], dtype=bool)
        tmax = np.where(exceed, 2.0, -2.0)
        got = heat_streak_prob(tmax, 0.0, h, 0.0)
        days = set()
        for i in range(20 - h + 1):
            if exceed[i: i + h].all():
                days.update(range(i, i + h))
        assert got == pytest.approx(len(days) / 20)

    def test_series_shorter_than_h(self):
        assert heat_streak_prob(np.full(2, 9.9), 0.0, 3, 0.0) == 0.0
