import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_etkf.errors import InvalidParameterError, ShapeError, SymmetryViolationError
from spectral_etkf.filter import (
    FilterConfig,
    ObservationSetup,
    assimilation_cycle,
    etkf_analysis,
    etkf_assimilate,
    gaspari_cohn,
    inflate,
    localization_matrix,
    periodic_distance,
    symmetric_sqrt,
    transform_matrix,
)
from spectral_etkf.spectral import apply_spectrum_smoothing, gaussian_kernel


def dense_kalman(E, y, idx, noise_var, L=None, additive=0.0):
    """Textbook Kalman update of the ensemble mean and covariance."""
    N = E.shape[1]
    m = E.mean(axis=0)
    C = np.cov(E, rowvar=False).reshape(N, N)
    H = np.zeros((len(idx), N))
    H[np.arange(len(idx)), idx] = 1.0
    B = C + additive * np.eye(N)
    if L is not None:
        B = L * B
    R = np.diag(np.broadcast_to(noise_var, (len(idx),)))
    G = B @ H.T @ np.linalg.inv(H @ B @ H.T + R)
    return m + G @ (y - H @ m), (np.eye(N) - G @ H) @ C


def gc_reference(d, c):
    """Piecewise Gaspari-Cohn written out term by term."""
    z = abs(d) / c
    if z <= 1:
        return -0.25 * z**5 + 0.5 * z**4 + 0.625 * z**3 - 5 / 3 * z**2 + 1
    if z < 2:
        return z**5 / 12 - 0.5 * z**4 + 0.625 * z**3 + 5 / 3 * z**2 - 5 * z + 4 - 2 / (3 * z)
    return 0.0


class TestScalarExample:
    def test_worked_example(self):
        setup = ObservationSetup(1, [0], np.sqrt(2.0))
        post = etkf_assimilate(np.array([[1.0], [-1.0]]), [2.0], setup)
        assert post.mean() == pytest.approx(1.0, abs=1e-10)
        assert post.var(ddof=1) == pytest.approx(1.0, abs=1e-10)


class TestAgainstDenseKalman:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_small_instances(self, seed):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(1, 4))
        M = int(rng.integers(1, N + 1))
        K = int(rng.integers(2, 5))
        idx = np.sort(rng.choice(N, M, replace=False))
        std = rng.uniform(0.3, 2.0, M)
        E = rng.normal(size=(K, N)) * rng.uniform(0.5, 3.0)
        y = rng.normal(size=M)
        post = etkf_assimilate(E, y, ObservationSetup(N, idx, std))
        mean, cov = dense_kalman(E, y, idx, std**2)
        np.testing.assert_allclose(post.mean(axis=0), mean, atol=1e-8)
        np.testing.assert_allclose(np.cov(post, rowvar=False).reshape(N, N), cov, atol=1e-8)

    def test_localized_mean(self):
        rng = np.random.default_rng(11)
        N, K = 20, 6
        E = rng.normal(size=(K, N))
        setup = ObservationSetup.every(N, 2, 0.5)
        y = rng.normal(size=setup.size)
        L = localization_matrix(N, 3.0)
        mean, _ = dense_kalman(E, y, setup.observed_indices, 0.25, L=L)
        np.testing.assert_allclose(etkf_assimilate(E, y, setup, L).mean(axis=0), mean, atol=1e-10)

    def test_additive_inflation_in_gain(self):
        rng = np.random.default_rng(12)
        E = rng.normal(size=(4, 6))
        setup = ObservationSetup.every(6, 1, 1.0)
        y = rng.normal(size=6)
        mean, _ = dense_kalman(E, y, setup.observed_indices, 1.0, additive=0.3)
        np.testing.assert_allclose(etkf_analysis(E, y, setup, additive=0.3).mean, mean, atol=1e-10)

    def test_gain_matches_dense(self):
        rng = np.random.default_rng(13)
        E = rng.normal(size=(5, 8))
        setup = ObservationSetup.every(8, 3, 0.7)
        L = localization_matrix(8, 2.0)
        a = etkf_analysis(E, rng.normal(size=setup.size), setup, L)
        C = L * np.cov(E, rowvar=False)
        H = setup.operator
        G = C @ H.T @ np.linalg.inv(H @ C @ H.T + setup.covariance)
        np.testing.assert_allclose(a.gain, G, atol=1e-12)


class TestETKFProperties:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.E = rng.normal(size=(10, 16)) + 3
        self.y = rng.normal(size=8)
        self.setup = ObservationSetup.every(16, 2, 0.4)

    def test_posterior_perturbations_mean_zero(self):
        post = etkf_assimilate(self.E, self.y, self.setup)
        X = post - post.mean(axis=0)
        np.testing.assert_allclose(X.sum(axis=0), 0, atol=1e-12)

    def test_transform_identity(self):
        a = etkf_analysis(self.E, self.y, self.setup)
        np.testing.assert_allclose(a.transform_sqrt @ a.transform_sqrt, a.transform, atol=1e-12)
        np.testing.assert_allclose(a.transform_sqrt, a.transform_sqrt.T, atol=1e-14)

    def test_uninformative_limit(self):
        weak = ObservationSetup.every(16, 2, 1e7)
        np.testing.assert_allclose(etkf_assimilate(self.E, self.y, weak), self.E, atol=1e-9)

    def test_perfect_observation_limit(self):
        E = np.array([[1.0], [3.0], [-2.0]])
        post = etkf_assimilate(E, [0.5], ObservationSetup(1, [0], 1e-6))
        assert post.mean() == pytest.approx(0.5, abs=1e-8)
        assert post.std() < 1e-5

    def test_transform_matrix_formula(self):
        Y = np.random.default_rng(0).normal(size=(4, 3))
        expected = np.linalg.inv(np.eye(4) + Y @ Y.T / 0.5)
        np.testing.assert_allclose(transform_matrix(Y, 0.5), expected, atol=1e-12)

    def test_rejects_zero_noise(self):
        with pytest.raises(InvalidParameterError):
            etkf_assimilate(self.E, self.y, ObservationSetup.every(16, 2, 0.0))

    def test_rejects_wrong_observation_count(self):
        with pytest.raises(ShapeError):
            etkf_assimilate(self.E, self.y[:3], self.setup)

    def test_rejects_wrong_localization_shape(self):
        with pytest.raises(ShapeError):
            etkf_assimilate(self.E, self.y, self.setup, np.ones((3, 3)))


class TestSymmetricSqrt:
    def test_square(self):
        A = np.random.default_rng(0).normal(size=(5, 5))
        T = A @ A.T
        R = symmetric_sqrt(T)
        np.testing.assert_allclose(R @ R, T, atol=1e-10)

    def test_clips_roundoff(self):
        T = np.diag([1.0, -1e-12])
        np.testing.assert_allclose(symmetric_sqrt(T), np.diag([1.0, 0.0]))

    def test_rejects_indefinite(self):
        with pytest.raises(SymmetryViolationError):
            symmetric_sqrt(np.diag([1.0, -0.1]))


class TestGaspariCohn:
    @pytest.mark.parametrize("c", [1.0, 4.0, 7.5])
    def test_reference_values(self, c):
        assert gaspari_cohn(0.0, c) == 1.0
        assert gaspari_cohn(c, c) == pytest.approx(0.208333, abs=1e-6)
        assert gaspari_cohn(2 * c, c) == 0.0
        assert gaspari_cohn(3 * c, c) == 0.0

    @given(st.floats(0, 10), st.floats(0.5, 8))
    @settings(max_examples=100, deadline=None)
    def test_matches_piecewise_reference(self, d, c):
        assert gaspari_cohn(d, c) == pytest.approx(gc_reference(d, c), abs=1e-12)

    def test_continuous_and_monotone(self):
        d = np.linspace(0, 5, 5001)
        g = gaspari_cohn(d, 2.0)
        assert np.all(np.diff(g) <= 1e-15)
        assert np.abs(np.diff(g)).max() < 2e-3
        assert np.all(g >= 0)

    def test_rejects_bad_halfwidth(self):
        with pytest.raises(InvalidParameterError):
            gaspari_cohn(1.0, 0.0)


class TestLocalization:
    def test_periodic_distance(self):
        d = periodic_distance(6)
        assert d[0].tolist() == [0, 1, 2, 3, 2, 1]

    def test_band_structure(self):
        L = localization_matrix(32, 3.0)
        np.testing.assert_array_equal(np.diag(L), 1.0)
        np.testing.assert_array_equal(L, L.T)
        assert L[0, 6] == 0.0 and L[0, 5] > 0
        assert L[0, 31] == L[0, 1]

    def test_no_localization(self):
        np.testing.assert_array_equal(localization_matrix(8, math.inf), np.ones((8, 8)))

    def test_read_only(self):
        with pytest.raises(ValueError):
            localization_matrix(8, 2.0)[0, 0] = 3.0


class TestInflation:
    def test_worked_example(self):
        out = inflate(np.array([[1.0], [-1.0]]), 1.1)
        np.testing.assert_allclose(out.ravel(), [np.sqrt(1.1), -np.sqrt(1.1)], rtol=1e-15)

    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 2.0))
    @settings(max_examples=50, deadline=None)
    def test_scales_covariance_by_rho(self, seed, rho):
        E = np.random.default_rng(seed).normal(size=(6, 5)) + 4
        out = inflate(E, rho)
        np.testing.assert_allclose(out.mean(axis=0), E.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(np.cov(out, rowvar=False), rho * np.cov(E, rowvar=False), rtol=1e-12, atol=1e-14)

    def test_rejects_deflation(self):
        with pytest.raises(InvalidParameterError):
            inflate(np.zeros((2, 3)), 0.9)


class TestFilterConfig:
    @pytest.mark.parametrize("kwargs", [dict(rho=0.99), dict(c=0.0), dict(mode="bogus"), dict(additive=-1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidParameterError):
            FilterConfig(**kwargs)

    def test_kernel_follows_sigma(self):
        assert FilterConfig(sigma=0.5).kernel.sigma == 0.5


class TestCycle:
    def setup_method(self):
        rng = np.random.default_rng(21)
        self.E = rng.normal(size=(8, 32)).cumsum(axis=1) * 0.3 + 2
        self.setup = ObservationSetup.every(32, 2, 0.5)
        self.y = rng.normal(size=self.setup.size)

    def test_plain_cycle_is_etkf(self):
        out = assimilation_cycle(self.E, self.y, self.setup, FilterConfig())
        np.testing.assert_array_equal(out, etkf_assimilate(self.E, self.y, self.setup))

    def test_order_smooth_inflate_analyse(self):
        cfg = FilterConfig(rho=1.1, c=4.0, sigma=0.5)
        expected = apply_spectrum_smoothing(self.E, gaussian_kernel(0.5))
        expected = inflate(expected, 1.1)
        expected = etkf_assimilate(expected, self.y, self.setup, localization_matrix(32, 4.0))
        np.testing.assert_array_equal(assimilation_cycle(self.E, self.y, self.setup, cfg), expected)

    def test_mode_off_ignores_sigma(self):
        a = assimilation_cycle(self.E, self.y, self.setup, FilterConfig(sigma=0.7, mode="off"))
        b = assimilation_cycle(self.E, self.y, self.setup, FilterConfig())
        np.testing.assert_array_equal(a, b)


class TestObservationSetup:
    def test_every(self):
        s = ObservationSetup.every(8, 3, 0.1)
        assert s.observed_indices.tolist() == [0, 3, 6]
        np.testing.assert_array_equal(s.operator @ np.arange(8.0), [0, 3, 6])

    @pytest.mark.parametrize("idx", [[], [2, 1], [0, 8], [-1, 2]])
    def test_invalid_indices(self, idx):
        with pytest.raises(InvalidParameterError):
            ObservationSetup(8, idx, 0.1)
