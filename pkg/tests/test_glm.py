import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mc_cov_se
from prsa.exceptions import (
    DesignError,
    EstimationError,
    FilterError,
    ParameterError,
    SingularDesignError,
)
from prsa.glm import (
    EventTable,
    GLSRegression,
    HrfParams,
    NoiseModel,
    ar1_covariance,
    ar1_whitener,
    build_design,
    canonical_hrf,
    coefficient_covariance_sandwich,
    dct_basis,
    dct_highpass,
    design_bcov,
    estimate_ar1,
    fit_two_pass,
    gls_fit,
)


def _gamma_pdf(t, shape, scale):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp((shape - 1) * np.log(t[pos]) - t[pos] / scale
                      - math.lgamma(shape) - shape * math.log(scale))
    return out


def _ar1_noise(rng, n, size, rho):
    e = rng.standard_normal((n, size))
    y = np.empty_like(e)
    y[0] = e[0]
    s = math.sqrt(1 - rho * rho)
    for t in range(1, n):
        y[t] = rho * y[t - 1] + s * e[t]
    return y


# --------------------------------------------------------------------- HRF


class TestCanonicalHrf:
    def test_zero_at_origin(self):
        assert canonical_hrf()[0] == 0.0

    def test_peak_location_matches_closed_form(self):
        t = np.arange(0, 32, 0.001)
        oracle = _gamma_pdf(t, 6, 1) - _gamma_pdf(t, 16, 1) / 6
        t_peak = t[np.argmax(oracle)]
        h = canonical_hrf()
        assert abs(np.argmax(h) * 0.1 - t_peak) <= 0.1
        assert abs(np.argmax(h) * 0.1 - 5.0) <= 0.1

    def test_length_and_normalisation(self):
        h = canonical_hrf(HrfParams(kernel_length=32, microtime_dt=0.1))
        assert h.size == 320
        assert h.max() == pytest.approx(1.0)

    def test_no_undershoot_is_nonnegative(self):
        assert np.all(canonical_hrf(HrfParams(undershoot_ratio=0)) >= 0)

    @pytest.mark.parametrize("field", ["peak_dispersion", "undershoot_dispersion"])
    def test_bad_dispersion(self, field):
        with pytest.raises(ParameterError):
            canonical_hrf(HrfParams(**{field: 0.0}))


# ------------------------------------------------------------------ design


def _brute_force_column(onset, duration, kernel, dt, scan_times):
    n_micro = int(math.ceil(scan_times[-1] / dt)) + 2
    start = int(round(onset / dt))
    stop = max(start + 1, int(round((onset + duration) / dt)))
    conv = [0.0] * n_micro
    for m in range(n_micro):
        acc = 0.0
        for k in range(start, min(stop, n_micro)):
            if 0 <= m - k < len(kernel):
                acc += kernel[m - k]
        conv[m] = acc
    out = []
    for t in scan_times:
        lo = int(math.floor(t / dt + 1e-9))
        frac = t / dt - lo
        hi = min(lo + 1, n_micro - 1)
        out.append(conv[lo] * (1 - frac) + conv[hi] * frac)
    return np.array(out)


class TestBuildDesign:
    def test_impulse_reproduces_kernel(self):
        ev = EventTable([10.0], [0.0], [1], n_scans=80, tr=0.5)
        X = build_design(ev)
        h = canonical_hrf()
        col = X.values[:, 0]
        for s in range(80):
            k = int(round((s * 0.5 - 10.0) / 0.1))
            expected = h[k] if 0 <= k < h.size else 0.0
            assert col[s] == pytest.approx(expected, abs=1e-12)

    def test_matches_brute_force_convolution(self):
        ev = EventTable([3.3, 20.0], [3.0, 1.7], [1, 2], n_scans=30, tr=2.26)
        X = build_design(ev)
        h = canonical_hrf()
        times = np.arange(30) * 2.26
        for j in range(2):
            oracle = _brute_force_column(ev.onsets[j], ev.durations[j], h, 0.1, times)
            np.testing.assert_allclose(X.values[:, j], oracle, atol=1e-10)

    def test_distant_events_are_orthogonal(self):
        ev = EventTable([0.0, 40.0], [3.0, 3.0], [1, 2], n_scans=50, tr=2.0)
        X = build_design(ev).values
        assert abs(X[:, 0] @ X[:, 1]) < 1e-12

    def test_block_design_column_count(self, block_design):
        assert block_design.values.shape == (65, 25)
        assert block_design.n_stimuli == 24
        np.testing.assert_array_equal(block_design.values[:, -1], 1.0)

    def test_nuisance_appended_before_intercept(self):
        ev = EventTable([0.0], [3.0], [1], n_scans=20, tr=2.0)
        nuis = np.arange(20.0)
        X = build_design(ev, nuisance=nuis)
        assert X.names == ["trial1", "nuisance1", "intercept"]
        np.testing.assert_array_equal(X.values[:, 1], nuis)
        with pytest.raises(DesignError):
            build_design(ev, nuisance=np.ones(19))

    @pytest.mark.parametrize("onsets, durations", [
        ([5.0, 5.0], [1.0, 1.0]),      # not strictly increasing
        ([-1.0, 5.0], [1.0, 1.0]),     # negative onset
        ([0.0, 38.5], [1.0, 3.0]),     # runs past the last scan
    ])
    def test_invalid_events(self, onsets, durations):
        with pytest.raises(DesignError):
            EventTable(onsets, durations, [1, 2], n_scans=20, tr=2.0)


# ------------------------------------------------------------------ filter


class TestHighpass:
    def test_infinite_cutoff_is_centering(self):
        n = 12
        np.testing.assert_allclose(dct_highpass(n, 2.0, math.inf),
                                   np.eye(n) - np.ones((n, n)) / n, atol=1e-14)

    def test_annihilates_basis(self):
        s = dct_basis(65, 2.26, 128.0)
        h0 = dct_highpass(65, 2.26, 128.0)
        assert np.abs(h0 @ s).max() < 1e-10

    def test_basis_size_by_enumeration(self):
        n, tr, cutoff = 65, 2.26, 128.0
        # frequency of DCT column k is k / (2 n tr); keep those below 1 / cutoff
        count = 0
        while count / (2 * n * tr) < 1 / cutoff:
            count += 1
        assert count == 3
        assert dct_basis(n, tr, cutoff).shape == (n, count)

    def test_idempotent_symmetric(self):
        h0 = dct_highpass(65, 2.26, 128.0)
        assert np.abs(h0 @ h0 - h0).max() < 1e-10
        assert np.abs(h0 - h0.T).max() < 1e-10

    def test_cutoff_errors(self):
        with pytest.raises(FilterError):
            dct_basis(65, 2.26, 4.0)        # below 2 tr
        with pytest.raises(FilterError):
            dct_basis(10, 2.0, 4.4)         # basis spans the series


# -------------------------------------------------------------------- AR(1)


class TestAr1:
    @pytest.mark.parametrize("rho", [0.0, 0.3, 0.8, -0.4])
    def test_whitener_inverts_covariance(self, rho):
        n = 30
        w = ar1_whitener(n, rho)
        np.testing.assert_allclose(w @ ar1_covariance(n, rho) @ w.T, np.eye(n), atol=1e-10)
        assert np.all(np.triu(w, 1) == 0) and np.all(np.tril(w, -2) == 0)

    def test_identity_without_correlation(self):
        nm = NoiseModel(10, 2.0)
        np.testing.assert_array_equal(nm.whitener, np.eye(10))
        np.testing.assert_array_equal(nm.g_inv, np.eye(10))

    def test_white_noise(self, rng):
        assert abs(estimate_ar1(rng.standard_normal((100, 100)))) < 0.05

    def test_constant_clamps(self):
        assert estimate_ar1(np.full((50, 3), 2.0)) == 0.95

    def test_recovers_rho(self, rng):
        y = _ar1_noise(rng, 1000, 100, 0.3)
        assert estimate_ar1(y) == pytest.approx(0.30, abs=0.02)

    def test_zero_energy(self):
        with pytest.raises(EstimationError):
            estimate_ar1(np.zeros((10, 2)))
        with pytest.raises(EstimationError):
            estimate_ar1(np.ones((1, 2)))


# ---------------------------------------------------------------------- GLS


class TestGlsFit:
    def test_orthonormal_ols(self, rng):
        X, _ = np.linalg.qr(rng.standard_normal((30, 4)))
        y = rng.standard_normal((30, 7))
        fit = gls_fit(y, X)
        np.testing.assert_allclose(fit.betas, (X.T @ y).T, atol=1e-12)
        np.testing.assert_allclose(fit.bcov, np.eye(4), atol=1e-12)

    def test_exact_fit(self, rng):
        X = rng.standard_normal((25, 3))
        beta = rng.standard_normal((3, 5))
        fit = gls_fit(X @ beta, X, NoiseModel(25, 2.0, 0.4))
        np.testing.assert_allclose(fit.betas, beta.T, atol=1e-10)
        assert np.all(fit.sigma2 < 1e-10)

    def test_matches_ols_when_white(self, rng, block_design):
        y = rng.standard_normal((65, 40))
        fit = gls_fit(y, block_design, NoiseModel(65, 2.26))
        ref = np.linalg.lstsq(block_design.values, y, rcond=None)[0]
        np.testing.assert_allclose(fit.betas, ref.T, atol=1e-12, rtol=0)

    def test_scale_equivariance(self, rng, block_design):
        y = rng.standard_normal((65, 10))
        nm = NoiseModel(65, 2.26, 0.3, 128.0)
        a, b = gls_fit(y, block_design, nm), gls_fit(3.5 * y, block_design, nm)
        np.testing.assert_allclose(b.betas, 3.5 * a.betas, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(b.sigma2, 3.5 ** 2 * a.sigma2, rtol=1e-10)

    def test_chunking_is_bit_identical(self, rng, block_design):
        y = rng.standard_normal((65, 101))
        nm = NoiseModel(65, 2.26, 0.2, 128.0)
        a = gls_fit(y, block_design, nm)
        b = gls_fit(y, block_design, nm, chunk_size=17)
        c = gls_fit(np.tile(y, 6), block_design, nm, chunk_size=300)
        np.testing.assert_array_equal(a.betas, b.betas)
        np.testing.assert_array_equal(a.sigma2, b.sigma2)
        whole = gls_fit(np.tile(y, 6), block_design, nm)
        np.testing.assert_array_equal(whole.betas, c.betas)

    def test_filter_drops_intercept(self, rng, block_design):
        fit = gls_fit(rng.standard_normal((65, 3)), block_design, NoiseModel(65, 2.26, 0.0, 128.0))
        assert fit.dropped_columns == [24]
        assert fit.betas.shape == (3, 24)
        # residual dof: 65 scans - 3 drift columns - 24 regressors
        assert fit.dof == pytest.approx(38.0)

    def test_singular_design(self, rng):
        X = rng.standard_normal((20, 2))
        with pytest.raises(SingularDesignError):
            gls_fit(rng.standard_normal((20, 1)), np.column_stack([X, X[:, 0]]))

    def test_bcov_psd_and_sigma_nonnegative(self, rng, block_design):
        fit = gls_fit(rng.standard_normal((65, 20)), block_design, NoiseModel(65, 2.26, 0.4))
        assert np.allclose(fit.bcov, fit.bcov.T)
        assert np.linalg.eigvalsh(fit.bcov).min() > 0
        assert np.all(np.diag(fit.bcov) > 0) and np.all(fit.sigma2 >= 0)

    def test_monte_carlo_coefficient_covariance(self):
        rng = np.random.default_rng(7)
        n, reps, rho = 60, 10_000, 0.4
        t = np.arange(n)
        X = np.column_stack([np.sin(t / 5.0), np.sin(t / 5.0 + 0.6)])
        noise = NoiseModel(n, 2.0, rho)
        y = _ar1_noise(rng, n, reps, rho)
        fit = gls_fit(y, X, noise)
        cov, se = mc_cov_se(fit.betas)
        expected = design_bcov(X, noise)       # sigma^2 = 1
        assert np.all(np.abs(cov - expected) < 3 * se)
        assert np.mean(fit.sigma2) == pytest.approx(1.0, abs=0.01)

    def test_two_pass_estimates_rho(self):
        rng = np.random.default_rng(11)
        n = 200
        X = np.column_stack([np.sin(np.arange(n) / 7.0), np.ones(n)])
        y = _ar1_noise(rng, n, 300, 0.35)
        fit = fit_two_pass(y, X, tr=1.0)
        assert fit.noise.ar1_rho == pytest.approx(0.35, abs=0.03)
        fixed = fit_two_pass(y, X, tr=1.0, rho=0.0)
        np.testing.assert_array_equal(fixed.betas, gls_fit(y, X).betas)


class TestSandwich:
    def test_true_equals_working(self, rng):
        X = rng.standard_normal((40, 3))
        G = ar1_covariance(40, 0.5)
        np.testing.assert_allclose(coefficient_covariance_sandwich(X, G, G),
                                   np.linalg.inv(X.T @ np.linalg.inv(G) @ X), atol=1e-10)

    def test_ols_white(self, rng):
        X = rng.standard_normal((40, 3))
        I = np.eye(40)
        np.testing.assert_allclose(coefficient_covariance_sandwich(X, I, I),
                                   np.linalg.inv(X.T @ X), atol=1e-12)

    def test_ols_on_ar1_noise(self):
        rng = np.random.default_rng(3)
        n, reps = 50, 10_000
        t = np.arange(n)
        X = np.column_stack([np.cos(t / 4.0), np.cos(t / 4.0 + 0.8)])
        y = _ar1_noise(rng, n, reps, 0.3)
        cov, se = mc_cov_se(gls_fit(y, X).betas)
        expected = coefficient_covariance_sandwich(X, np.eye(n), ar1_covariance(n, 0.3))
        assert np.all(np.abs(cov - expected) < 3 * se)

    def test_accepts_singular_working_precision(self, block_design):
        nm = NoiseModel(65, 2.26, 0.0, 128.0)
        X = block_design.values[:, :24]
        out = coefficient_covariance_sandwich(X, None, np.eye(65), g_inv=nm.g_inv)
        np.testing.assert_allclose(out, design_bcov(X, nm), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 100.0), st.integers(0, 2**31 - 1))
def test_scale_property(c, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 3))
    y = rng.standard_normal((20, 4))
    a, b = gls_fit(y, X), gls_fit(c * y, X)
    np.testing.assert_allclose(b.betas, c * a.betas, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.sigma2, c * c * a.sigma2, rtol=1e-9, atol=1e-15)


class TestEstimator:
    def test_get_params_and_clone(self):
        from sklearn.base import clone
        est = GLSRegression(tr=2.0, rho="estimate", highpass_cutoff=128.0)
        assert est.get_params()["rho"] == "estimate"
        assert clone(est).get_params() == est.get_params()

    def test_fit_predict(self, rng, block_design):
        y = rng.standard_normal((65, 12))
        est = GLSRegression(tr=2.26, rho=0.2).fit(block_design, y)
        ref = gls_fit(y, block_design, NoiseModel(65, 2.26, 0.2))
        np.testing.assert_array_equal(est.coef_, ref.betas)
        assert est.rho_ == 0.2
        assert est.predict(block_design).shape == (65, 12)

    def test_plain_arrays(self, rng):
        X = rng.standard_normal((30, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + 0.01 * rng.standard_normal(30)
        est = GLSRegression(tr=1.0, stimulus_columns=[0, 1]).fit(X, y)
        np.testing.assert_allclose(est.coef_[0], [1.0, -2.0, 0.5], atol=0.05)
        assert est.result_.stimulus_bcov.shape == (2, 2)
        assert est.score(X, y) > 0.99
