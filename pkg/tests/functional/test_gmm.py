import numpy as np
import pytest

from ape_qarch.correlators import compute_correlations, fit_ca, fit_leverage
from ape_qarch.estimate.gmm import (
    AmplitudeMode,
    GMMProblem,
    gmm_calibrate,
    gmm_diagonal,
    gmm_offdiagonal,
    smooth_correlations,
)
from ape_qarch.exceptions import EstimationError
from ape_qarch.moments import theoretical_correlations


def test_exact_recovery_on_theoretical_correlations(arch_kernel):
    problem = GMMProblem(
        correlations=theoretical_correlations(arch_kernel, max_lag=10),
        q_diag=5,
        q_off=0,
        amplitude=AmplitudeMode.SQUARED,
    )
    result = gmm_diagonal(problem)
    np.testing.assert_allclose(result.k, arch_kernel.diagonal, rtol=1e-8)
    np.testing.assert_allclose(result.L, 0.0, atol=1e-12)
    assert result.s2 == pytest.approx(arch_kernel.s2, rel=1e-8)
    assert not result.unstable


def test_larger_horizon_pads_with_zeros(arch_kernel):
    problem = GMMProblem(
        correlations=theoretical_correlations(arch_kernel, max_lag=12),
        q_diag=8,
        q_off=0,
        amplitude=AmplitudeMode.SQUARED,
    )
    result = gmm_diagonal(problem)
    np.testing.assert_allclose(result.k[5:], 0.0, atol=1e-8)


def test_iid_series_has_no_feedback(rng):
    returns = rng.standard_normal(50_000)
    problem = GMMProblem(correlations=compute_correlations(returns, max_lag=5), q_diag=3, q_off=0)
    result = gmm_calibrate(problem)
    np.testing.assert_allclose(result.k, 0.0, atol=0.05)
    np.testing.assert_allclose(result.L, 0.0, atol=0.05)
    assert result.s2 == pytest.approx(1.0, abs=0.05)
    assert result.off_diagonal is None


def test_kernel_from_result(arch_kernel):
    problem = GMMProblem(
        correlations=theoretical_correlations(arch_kernel, max_lag=5),
        q_diag=5,
        q_off=0,
        amplitude=AmplitudeMode.SQUARED,
    )
    kernel = gmm_calibrate(problem).kernel()
    assert kernel.q == 5
    assert kernel.is_diagonal


def test_off_diagonal_block(two_scale_kernel):
    problem = GMMProblem(
        correlations=theoretical_correlations(two_scale_kernel, max_lag=6),
        q_diag=3,
        q_off=3,
        amplitude=AmplitudeMode.SQUARED,
    )
    result = gmm_calibrate(problem)
    assert result.off_diagonal.shape == (3, 3)
    np.testing.assert_array_equal(np.tril(result.off_diagonal), 0.0)
    assert np.all(np.isfinite(result.off_diagonal))
    kernel = result.kernel()
    np.testing.assert_allclose(kernel.K, kernel.K.T)


def test_horizon_validation(arch_kernel):
    correlations = theoretical_correlations(arch_kernel, max_lag=5)
    with pytest.raises(EstimationError, match="exceeds q_diag"):
        GMMProblem(correlations=correlations, q_diag=3, q_off=4)

    with pytest.raises(EstimationError, match="cannot support q_diag"):
        GMMProblem(correlations=correlations, q_diag=6, q_off=0)


def test_singular_system():
    returns = np.zeros(200)
    returns[::2] = 1.0
    problem = GMMProblem(correlations=compute_correlations(returns, max_lag=4), q_diag=3, q_off=0)
    with pytest.raises(EstimationError, match="Singular"):
        gmm_diagonal(problem)


def test_unstable_solution_is_flagged(arch_kernel):
    correlations = theoretical_correlations(arch_kernel, max_lag=4)
    c2 = np.array([0.0, 1.2, 0.9, 1.0, 0.9, 1.2, 0.0])
    c2 = np.concatenate(([0.0], c2, [0.0]))
    problem = GMMProblem(
        correlations=correlations.model_copy(update={"c2": c2}),
        q_diag=2,
        q_off=0,
        amplitude=AmplitudeMode.SQUARED,
    )
    result = gmm_diagonal(problem)
    np.testing.assert_allclose(result.k, [-0.18 / 0.19, 0.39 / 0.19])
    assert result.unstable


def test_smooth_correlations_replaces_positive_lags(rng):
    cs = compute_correlations(rng.standard_normal(3000), rng.uniform(0.5, 1.5, 3000), max_lag=10)
    tau = np.arange(1, 11, dtype=float)
    leverage = fit_leverage(-0.02 * np.exp(-tau / 5) - 0.01 * np.exp(-tau / 50))
    amplitude = fit_ca(0.1 * tau**-0.2)
    smoothed = smooth_correlations(cs, leverage, amplitude)
    np.testing.assert_allclose(smoothed.positive("lev"), leverage.evaluate(tau))
    np.testing.assert_allclose(smoothed.positive("ca_tilde"), amplitude.evaluate(tau))
    negative = -np.arange(1, 11)
    np.testing.assert_array_equal(smoothed.at("lev", negative), cs.at("lev", negative))
    np.testing.assert_array_equal(smoothed.ca, cs.ca)


def test_off_diagonal_needs_diagonal_inputs(two_scale_kernel):
    problem = GMMProblem(
        correlations=theoretical_correlations(two_scale_kernel, max_lag=6),
        q_diag=3,
        q_off=3,
        amplitude=AmplitudeMode.SQUARED,
    )
    with pytest.raises(EstimationError, match="shorter than q_off"):
        gmm_offdiagonal(problem, np.zeros(2), np.zeros(3))

    upper = gmm_offdiagonal(problem, two_scale_kernel.diagonal, np.zeros(3))
    assert upper.shape == (3, 3)
    assert np.count_nonzero(upper) <= 3
