import numpy as np
import pytest

from ape_qarch.correlators import (
    compute_correlations,
    compute_panel_correlations,
    measure_c2_exponent,
    tri_delta,
)
from ape_qarch.kernel import build_arch, figarch_diagonal
from ape_qarch.moments import (
    ResidualSpec,
    critical_g,
    figarch_beta,
    fourth_moment,
    fourth_moment_general,
    long_memory_reference,
    theoretical_c2,
)
from ape_qarch.simulate import SimConfig, aftershock_profile, simulate_panel, simulate_qarch

pytestmark = pytest.mark.slow


def sample_mean(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.shape[0]))


@pytest.fixture(scope="module")
def power_law_kernel():
    k = figarch_diagonal(0.11, 1.1, float("inf"), 300)
    return build_arch(k, s2=1 - float(k.sum()))


def test_endogenous_jumps_relax_slower_than_exogenous(power_law_kernel):
    endogenous = simulate_qarch(SimConfig(kernel=power_law_kernel, T=600_000, seed=31))
    thetas = [
        aftershock_profile(endogenous, threshold_sigmas=threshold).theta
        for threshold in (3.0, 4.0, 5.0)
    ]

    dates = list(range(2000, 598_000, 2000))
    forced = {date: 100.0 for date in dates}
    config = SimConfig(kernel=power_law_kernel, T=600_000, seed=32, forced_residuals=forced)
    exogenous = aftershock_profile(simulate_qarch(config), events=dates).theta

    assert exogenous == pytest.approx(1.1, abs=0.35)
    assert max(thetas) < 0.5
    assert exogenous - max(thetas) > 0.4
    assert thetas[-1] > thetas[0]


def test_long_memory_fourth_moment_matches_simulation():
    kernel = long_memory_reference(512)
    theory = fourth_moment(kernel)
    config = SimConfig(kernel=kernel, T=500_000, burn_in=20_000, seed=5)
    bundles = simulate_panel(config, 20, threads=4)
    mean, se = sample_mean([np.mean(b.sigma2**2) for b in bundles])
    assert se < 0.01
    assert abs(mean - theory.sigma4_mean) < 3 * se


def test_general_fourth_moment_matches_simulation(two_scale_kernel):
    theory = fourth_moment_general(two_scale_kernel)
    assert theory.stable4

    bundles = simulate_panel(SimConfig(kernel=two_scale_kernel, T=100_000, seed=13), 20, threads=4)
    mean, se = sample_mean([np.mean(b.sigma2**2) for b in bundles])
    assert abs(mean - theory.sigma4_mean) < 4 * se

    per_series = [
        compute_correlations(b.returns, max_lag=3, max_lag_d=0).positive("c2")
        for b in bundles
    ]
    c2 = np.mean(per_series, axis=0)
    c2_se = np.std(per_series, axis=0, ddof=1) / np.sqrt(len(per_series))
    assert np.all(np.abs(c2 - theory.c2_theory) < 4 * c2_se)


def test_time_reversal_asymmetry_of_intraday_surrogate():
    reference = long_memory_reference(100)
    tau = np.arange(1, 101)
    kernel = build_arch(reference.diagonal, s2=reference.s2, L=-0.02 * np.exp(-tau / 10))
    config = SimConfig(kernel=kernel, T=100_000, seed=23)
    bundles = simulate_panel(config, 8, threads=4, bins=20, intraday=ResidualSpec.student(4.0))
    correlations = compute_panel_correlations(
        [b.returns for b in bundles], [b.rs_vol for b in bundles], max_lag=100, max_lag_d=2
    )
    report = tri_delta(correlations, leverage=kernel.L, max_tau=50)
    delta = report.delta
    assert np.all(delta[1:] > 0)
    assert delta[50] > delta[25] > delta[10] > delta[1] > 0

    leverage = report.leverage_part
    assert np.all(leverage[1:6] < 0)
    assert np.all(5 * np.abs(leverage[1:]) < delta[1:])


def test_power_law_kernel_correlation_exponent():
    alpha, q = 1.2, 200
    k = figarch_diagonal(0.72 * critical_g(alpha, q), alpha, float("inf"), q)
    kernel = build_arch(k, s2=1 - float(k.sum()))
    theory = measure_c2_exponent(theoretical_c2(kernel)[1:], window=(10, 100))

    config = SimConfig(kernel=kernel, T=400_000, burn_in=20_000, seed=29)
    bundles = simulate_panel(config, 16, threads=4)
    correlations = compute_panel_correlations(
        [b.returns for b in bundles], max_lag=100, max_lag_d=0, threads=4
    )
    fit = measure_c2_exponent(correlations.positive("c2"), window=(10, 100))
    assert fit.beta == pytest.approx(theory.beta, abs=0.1)
    assert fit.beta == pytest.approx(figarch_beta(alpha - 1), abs=0.15)
