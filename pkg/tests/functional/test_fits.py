import numpy as np
import pytest

from ape_qarch.estimate.fits import (
    ProfileFit,
    fit_profile_curve,
    fit_s2_profile,
    fit_student_nu,
    residual_diagnostics,
    s2_profile,
    standardized_residuals,
    student_log_density,
)
from ape_qarch.exceptions import EstimationError, FitError
from ape_qarch.kernel import build_figarch
from ape_qarch.moments import ResidualSpec
from ape_qarch.simulate import SimConfig, draw_residuals, simulate_qarch


def test_s2_profile():
    np.testing.assert_allclose(s2_profile([0.1, 0.2, 0.05]), [0.9, 0.7, 0.65])
    np.testing.assert_allclose(s2_profile([0.1], mean_sigma2=2.0), [1.8])


def test_profile_curve_fit_on_exact_curve():
    truth = ProfileFit(s_inf2=0.2, alpha=1.2, g=0.1, q0=200.0, residual=0.0)
    q = np.arange(1, 501)
    fit = fit_profile_curve(q, truth.evaluate(q))
    assert fit.residual < 1e-3
    np.testing.assert_allclose(fit.evaluate(q), truth.evaluate(q), atol=2e-3)


def test_fit_s2_profile_of_long_memory_kernel():
    k = build_figarch(0.081, 1.11, 53.0, 256, s2=0.21).diagonal
    fit = fit_s2_profile(k)
    assert 0.0 <= fit.s_inf2 < 1.0
    assert fit.residual < 1e-2


def test_profile_needs_horizons():
    with pytest.raises(FitError, match="at least 5"):
        fit_profile_curve([1, 2, 3], [0.9, 0.8, 0.7])


def test_student_density_normalized():
    x = np.linspace(-60, 60, 200_001)
    density = np.exp(student_log_density(x, 6.4))
    dx = x[1] - x[0]
    assert np.sum(density) * dx == pytest.approx(1.0, abs=1e-4)
    assert np.sum(x * x * density) * dx == pytest.approx(1.0, abs=1e-2)


def test_fit_student_nu(rng):
    nu = 6.0
    sample = rng.standard_t(nu, 50_000) / np.sqrt(nu / (nu - 2))
    fit = fit_student_nu(sample)
    assert fit.nu == pytest.approx(nu, abs=1.0)
    assert not fit.at_boundary


def test_fit_student_nu_on_large_sample(rng):
    sample = draw_residuals(ResidualSpec.student(6.4), 1_000_000, rng)
    assert np.var(sample) == pytest.approx(1.0, abs=0.02)
    assert fit_student_nu(sample).nu == pytest.approx(6.4, abs=0.2)


def test_gaussian_residuals_push_nu_up(rng):
    fit = fit_student_nu(rng.standard_normal(50_000))
    assert fit.nu > 20


def test_nu_boundary_flag(rng):
    sample = rng.standard_t(3.0, 20_000) / np.sqrt(3.0)
    assert fit_student_nu(sample, bounds=(5.0, 50.0)).at_boundary


def test_fit_student_nu_empty():
    with pytest.raises(EstimationError, match="No residuals"):
        fit_student_nu([])


def test_standardized_residuals_recover_innovations(arch_kernel):
    bundle = simulate_qarch(SimConfig(kernel=arch_kernel, T=300, seed=6))
    xi = standardized_residuals(arch_kernel, bundle.returns)
    np.testing.assert_allclose(xi, bundle.residuals[arch_kernel.q :], rtol=1e-10)


def test_residual_diagnostics_flag_raw_returns(arch_kernel):
    bundle = simulate_qarch(SimConfig(kernel=arch_kernel, T=20_000, seed=7))
    raw = residual_diagnostics(bundle.returns, max_lag=5)
    assert raw.flagged[0]

    filtered = residual_diagnostics(standardized_residuals(arch_kernel, bundle.returns), 5)
    assert filtered.values.shape == (5,)
    assert filtered.flagged.sum() <= 1


def test_residual_diagnostics_short_input():
    with pytest.raises(EstimationError, match="more than 20"):
        residual_diagnostics(np.ones(10))
