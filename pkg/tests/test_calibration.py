import math
import warnings
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import make_synthetic
from rgbm.calibration import (
    DEFAULT_MU,
    CalibrationConfig,
    Datasets,
    TauSeries,
    estimate_sigma,
    fit_mu,
    fit_tau_series,
    fit_tau_year,
    init_lognormal,
    lognormal_dispersion,
    resolve_rates,
    run_seed,
    sigma_by_year,
    smooth,
    validate_forward,
    worker_count,
)
from rgbm.ensemble import ModelParams, fork_noise
from rgbm.errors import (
    DataError,
    GapError,
    InfeasibleTargetError,
    InsufficientDataError,
    InvalidStateError,
    RgbmWarning,
    UsageError,
)
from rgbm.inequality import ShareTarget, top_share


def small_cfg(**kw):
    base = dict(n_agents=5_000, n_runs=2, seed=3, mu=0.021, default_sigma=0.14)
    base.update(kw)
    return CalibrationConfig(**base)


class TestFitMu:
    def test_exact_exponential(self):
        w = {1950 + k: math.exp(0.03 * k) for k in range(10)}
        mu, se = fit_mu(w, 1950)
        assert mu == pytest.approx(0.03, abs=1e-12)
        assert se < 1e-12

    def test_constant(self):
        mu, _ = fit_mu({y: 4.2 for y in range(2000, 2010)})
        assert mu == pytest.approx(0.0, abs=1e-14)

    def test_t0_only_shifts_intercept(self):
        w = {y: math.exp(0.01 * y - 15) * (1 + 0.01 * (y % 3)) for y in range(1990, 2010)}
        assert fit_mu(w, 1990)[0] == pytest.approx(fit_mu(w, 0)[0], abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 0.05), st.integers(0, 2**32 - 1))
    def test_noisy_recovery(self, mu_true, seed):
        rng = np.random.default_rng(seed)
        t = np.arange(95)
        w = np.exp(mu_true * t) * (1 + 0.05 * rng.standard_normal(t.size))
        mu, se = fit_mu(dict(zip((1917 + t).tolist(), w.tolist())))
        # 2 stderr is a ~95% band; allow the rare draw outside it a little slack
        assert abs(mu - mu_true) <= 3 * se

    def test_rejects_nonpositive(self):
        with pytest.raises(DataError, match="1952"):
            fit_mu({1950: 1.0, 1951: 1.1, 1952: 0.0})

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            fit_mu({1950: 1.0, 1951: 1.1})


class TestSigma:
    def test_constant_closes(self):
        assert estimate_sigma(np.full(100, 17.0)) == 0.0

    def test_alternating_returns(self):
        r = 0.01
        n = 251
        logc = np.cumsum(np.r_[0.0, r * (-1.0) ** np.arange(n - 1)])
        got = estimate_sigma(np.exp(logc))
        m = n - 1
        # sample std of m values +-r: r * sqrt(m / (m - 1)) for even m
        assert got == pytest.approx(r * math.sqrt(m / (m - 1)) * math.sqrt(250), rel=1e-12)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            estimate_sigma(np.ones(29))

    def test_by_year_skips_short_years(self):
        rng = np.random.default_rng(0)
        closes = {}
        d = date(2000, 1, 3)
        v = 100.0
        while d.year < 2002:
            if d.weekday() < 5 and not (d.year == 2001 and d.month > 1):
                v *= math.exp(0.01 * rng.standard_normal())
                closes[d] = v
            d += timedelta(days=1)
        table = sigma_by_year(closes)
        assert set(table) == {2000}
        assert 0.1 < table[2000] < 0.22

    def test_default_rates(self):
        ds = Datasets(shares={2000: (ShareTarget(0.1, 0.5),)})
        mu, sig = resolve_rates(ds, CalibrationConfig())
        assert mu == DEFAULT_MU
        assert sig(1999) == 0.16


class TestInitLognormal:
    def test_dispersion_matches_lorenz_integral(self):
        s = lognormal_dispersion(ShareTarget(0.1, 0.8))
        assert s == pytest.approx(stats.norm.ppf(0.9) + stats.norm.ppf(0.8), abs=1e-12)
        assert s == pytest.approx(2.1232, abs=1e-4)
        # independent check: E[X; X > x_0.9] / E[X] for X = exp(s Z)
        z_q = stats.norm.ppf(0.9)
        tail, _ = integrate.quad(lambda z: math.exp(s * z - z * z / 2) / math.sqrt(2 * math.pi),
                                 z_q, 40.0)
        assert tail / math.exp(s * s / 2) == pytest.approx(0.8, abs=1e-3)

    def test_uniform_share_gives_equal_wealth(self):
        e = init_lognormal(100, ShareTarget(0.3, 0.3), seed=1)
        np.testing.assert_allclose(e.wealths, 1.0, rtol=1e-15)

    @pytest.mark.parametrize("share", [0.05, 1.0, 1.2])
    def test_infeasible(self, share):
        with pytest.raises(InfeasibleTargetError):
            init_lognormal(10, ShareTarget(0.1, share), seed=0)

    def test_large_sample_share_and_mean(self):
        e = init_lognormal(1_000_000, ShareTarget(0.1, 0.66), seed=5, time=1917.0)
        assert top_share(e.wealths, 0.1) == pytest.approx(0.66, abs=5e-3)
        assert np.mean(e.wealths) == pytest.approx(1.0, abs=1e-12)
        assert e.time == 1917.0 and e.step_count == 0

    def test_prefix_stable_in_n(self):
        a = init_lognormal(1000, ShareTarget(0.1, 0.5), seed=3).wealths
        b = init_lognormal(2000, ShareTarget(0.1, 0.5), seed=3).wealths
        # same variates up to the mean rescaling
        np.testing.assert_allclose(a / a[0], b[:1000] / b[0], rtol=1e-13)


class TestConfig:
    def test_bracket_must_contain_zero(self):
        with pytest.raises(UsageError):
            CalibrationConfig(tau_bracket=(0.1, 1.0))

    def test_unstable_bracket(self):
        with pytest.raises(Exception):
            CalibrationConfig(tau_bracket=(-100.0, 100.0), substeps_per_year=52)

    def test_window(self):
        with pytest.raises(UsageError):
            CalibrationConfig(smoothing_window_years=0)

    def test_run_seeds_distinct(self):
        seeds = {run_seed(0, r) for r in range(100)} | {run_seed(1, r) for r in range(100)}
        assert len(seeds) == 200

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.setenv("RGBM_THREADS", "3")
        assert worker_count(10) == 3
        assert worker_count(2) == 2
        assert worker_count(10, workers=1) == 1


class TestFitTauYear:
    @pytest.fixture(scope="class")
    @classmethod
    def start(cls):
        return init_lognormal(20_000, ShareTarget(0.1, 0.6), seed=11, time=1950.0)

    def _target(self, ens, tau, cfg, mu=0.021, sigma=0.14):
        noise = fork_noise(ens, cfg.step_config)
        x = noise.propagate(ens.wealths, ModelParams(mu, sigma, tau), cfg.step_config)
        return ShareTarget(0.1, top_share(x, 0.1))

    def test_recovers_zero(self, start):
        cfg = small_cfg()
        fit = fit_tau_year(start, self._target(start, 0.0, cfg), 0.021, 0.14, cfg)
        assert abs(fit.tau) <= cfg.tolerance
        assert fit.ensemble.time == 1951.0

    @pytest.mark.parametrize("tau_star", [-0.3, 0.037, 0.4])
    def test_recovers_known_tau(self, start, tau_star):
        cfg = small_cfg()
        fit = fit_tau_year(start, self._target(start, tau_star, cfg), 0.021, 0.14, cfg)
        assert fit.tau == pytest.approx(tau_star, abs=2 * cfg.tolerance)
        assert fit.objective < 1e-4
        assert not fit.boundary_hit

    def test_boundary_hit(self, start):
        cfg = small_cfg(tau_bracket=(-0.2, 0.2))
        with pytest.warns(RgbmWarning):
            fit = fit_tau_year(start, self._target(start, 0.6, cfg), 0.021, 0.14, cfg)
        assert fit.boundary_hit
        assert fit.tau == pytest.approx(0.2, abs=cfg.tolerance)

    def test_share_strictly_decreasing_in_tau(self, start):
        cfg = small_cfg()
        noise = fork_noise(start, cfg.step_config)
        s = [top_share(noise.propagate(start.wealths, ModelParams(0.021, 0.14, t),
                                       cfg.step_config), 0.1) for t in (-0.1, 0.0, 0.1)]
        assert s[0] > s[1] > s[2]

    def test_objective_is_pure(self, start):
        cfg = small_cfg()
        target = ShareTarget(0.1, 0.6)
        a = fit_tau_year(start, target, 0.021, 0.14, cfg)
        b = fit_tau_year(start, target, 0.021, 0.14, cfg)
        assert a.tau == b.tau and a.objective == b.objective
        np.testing.assert_array_equal(a.ensemble.wealths, b.ensemble.wealths)

    def test_round_trip_constant_tau(self):
        # data from tau* = 0.03 on independent noise; annual fits scatter around tau*
        ds = make_synthetic([0.03] * 12, n=100_000, seed=2024)
        cfg = CalibrationConfig(n_agents=100_000, n_runs=1, seed=1, mu=0.021, default_sigma=0.14)
        raw = fit_tau_series(ds, 0.1, cfg, workers=1)
        assert abs(np.mean(raw.tau[2:]) - 0.03) <= 0.01


class TestFitTauSeries:
    @pytest.fixture(scope="class")
    @classmethod
    def data(cls):
        return make_synthetic([0.05] * 6 + [-0.03] * 6, n=20_000, seed=8)

    def test_shape_and_flags(self, data):
        s = fit_tau_series(data, 0.1, small_cfg(), workers=1)
        np.testing.assert_array_equal(s.years, np.arange(1901, 1913))
        assert s.spinup.tolist() == [True] * 3 + [False] * 9
        assert s.provenance == "raw" and s.n_runs == 2
        assert np.all(np.isfinite(s.stderr))

    def test_deterministic(self, data):
        a = fit_tau_series(data, 0.1, small_cfg(), workers=1)
        b = fit_tau_series(data, 0.1, small_cfg(), workers=1)
        np.testing.assert_array_equal(a.tau, b.tau)
        np.testing.assert_array_equal(a.stderr, b.stderr)

    def test_identical_runs_zero_spread(self, data, monkeypatch):
        import rgbm.calibration as cal
        monkeypatch.setattr(cal, "run_seed", lambda master, run: 77)
        s = fit_tau_series(data, 0.1, small_cfg(n_runs=3), workers=1)
        np.testing.assert_array_equal(s.stderr, 0.0)

    def test_single_run_stderr_nan(self, data):
        s = fit_tau_series(data, 0.1, small_cfg(n_runs=1), workers=1)
        assert np.isnan(s.stderr).all()

    def test_stderr_scaling(self, data):
        se4 = fit_tau_series(data, 0.1, small_cfg(n_runs=4, n_agents=2_000), workers=1).stderr
        se16 = fit_tau_series(data, 0.1, small_cfg(n_runs=16, n_agents=2_000), workers=1).stderr
        ratio = np.mean(se4) / np.mean(se16)
        assert 1.4 < ratio < 2.8

    def test_seed_shift(self, data):
        base = fit_tau_series(data, 0.1, small_cfg(n_runs=4, seed=0), workers=1)
        inside = 0
        total = 0
        for seed in range(1, 11):
            other = fit_tau_series(data, 0.1, small_cfg(n_runs=4, seed=seed), workers=1)
            band = 3 * np.hypot(base.stderr, other.stderr)
            inside += int(np.sum(np.abs(other.tau - base.tau) <= band))
            total += other.tau.size
        assert inside / total >= 0.95

    def test_gap(self):
        ds = Datasets(shares={y: (ShareTarget(0.1, 0.5),) for y in (2000, 2001, 2003)})
        with pytest.raises(GapError):
            fit_tau_series(ds, 0.1, small_cfg())

    def test_missing_q(self):
        ds = Datasets(shares={2000: (ShareTarget(0.1, 0.5),), 2001: (ShareTarget(0.01, 0.2),)})
        with pytest.raises(GapError):
            fit_tau_series(ds, 0.1, small_cfg())

    def test_substep_doubling(self):
        ds = make_synthetic([0.05] * 12, n=50_000, seed=31)
        cfg = dict(n_agents=50_000, n_runs=2, seed=4, mu=0.021, default_sigma=0.14)
        a = fit_tau_series(ds, 0.1, CalibrationConfig(substeps_per_year=52, **cfg), workers=1)
        b = fit_tau_series(ds, 0.1, CalibrationConfig(substeps_per_year=104, **cfg), workers=1)
        assert abs(np.mean(a.tau[3:]) - np.mean(b.tau[3:])) < 0.01


def series(values, stderr=None, start=2000):
    v = np.asarray(values, dtype=float)
    se = np.zeros_like(v) if stderr is None else np.asarray(stderr, dtype=float)
    return TauSeries(years=np.arange(start, start + v.size), tau=v, stderr=se)


class TestSmooth:
    def test_constant(self):
        out = smooth(series(np.full(30, 0.04)), 10)
        np.testing.assert_allclose(out.tau, 0.04, rtol=1e-15)
        assert out.provenance == "smoothed"

    def test_linear_interior(self):
        v = 0.01 * np.arange(30) - 0.1
        out = smooth(series(v), 10)
        np.testing.assert_allclose(out.tau[5:-5], v[5:-5], atol=1e-15)

    def test_right_edge_spike(self):
        v = np.zeros(20)
        v[-1] = 1.0
        assert smooth(series(v), 10).tau[-1] == pytest.approx(1 / 6, abs=1e-15)

    def test_window_one_identity(self, rng):
        v = rng.standard_normal(15)
        s = series(v, np.abs(v))
        out = smooth(s, 1)
        np.testing.assert_array_equal(out.tau, v)
        np.testing.assert_allclose(out.stderr, np.abs(v))

    def test_length_preserved(self, rng):
        out = smooth(series(rng.standard_normal(5)), 10)
        assert len(out) == 5
        np.testing.assert_allclose(out.tau, out.tau[0])  # window spans everything

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=40),
           st.lists(st.floats(-1, 1), min_size=1, max_size=40),
           st.floats(-3, 3), st.integers(1, 12))
    def test_linear(self, a, b, c, w):
        n = min(len(a), len(b))
        a, b = np.array(a[:n]), np.array(b[:n])
        lhs = smooth(series(a + c * b), w).tau
        rhs = smooth(series(a), w).tau + c * smooth(series(b), w).tau
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_stderr_of_windowed_mean(self):
        out = smooth(series(np.zeros(30), np.full(30, 0.3)), 10)
        assert out.stderr[15] == pytest.approx(0.3 / math.sqrt(11))
        assert out.stderr[-1] == pytest.approx(0.3 / math.sqrt(6))

    def test_bad_window(self):
        with pytest.raises(UsageError):
            smooth(series([1.0]), 0)

    def test_series_invariants(self):
        with pytest.raises(GapError):
            TauSeries(years=[2000, 2002], tau=[0, 0], stderr=[0, 0])
        with pytest.raises(InvalidStateError):
            TauSeries(years=[2000], tau=[math.nan], stderr=[0])


class TestValidateForward:
    @pytest.fixture(scope="class")
    @classmethod
    def fitted(cls):
        ds = make_synthetic([0.08] * 10 + [-0.04] * 10, n=20_000, seed=17)
        cfg = small_cfg(n_agents=20_000, n_runs=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RgbmWarning)
            raw = fit_tau_series(ds, 0.1, cfg, workers=1)
        return ds, cfg, raw

    def test_raw_series_reproduces_fit(self, fitted):
        ds, cfg, raw = fitted
        v = validate_forward(ds, raw, 0.1, cfg, workers=1)
        # the fitted share matches its target to a small multiple of the tau tolerance
        assert np.max(v.abs_err) < 1e-3
        np.testing.assert_array_equal(v.years, raw.years)

    def test_shuffled_series_is_worse(self, fitted):
        ds, cfg, raw = fitted
        sm = smooth(raw, cfg.smoothing_window_years)
        good = validate_forward(ds, sm, 0.1, cfg, workers=1).mean_abs_error()
        perm = np.random.default_rng(2718).permutation(len(sm))
        shuffled = TauSeries(years=sm.years, tau=sm.tau[perm], stderr=sm.stderr[perm],
                             provenance="smoothed")
        bad = validate_forward(ds, shuffled, 0.1, cfg, workers=1).mean_abs_error()
        assert bad >= 3 * good

    def test_missing_years(self, fitted):
        ds, cfg, raw = fitted
        short = TauSeries(years=raw.years[:-2], tau=raw.tau[:-2], stderr=raw.stderr[:-2])
        with pytest.raises(GapError):
            validate_forward(ds, short, 0.1, cfg, workers=1)
