import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ape_qarch.exceptions import KernelError
from ape_qarch.kernel import (
    FamilySpec,
    FamilyTag,
    FeedbackKernel,
    build_arch,
    build_bb,
    build_figarch,
    build_from_spec,
    build_long_trend,
    build_multi_scale,
    build_two_scale,
    build_unconstrained,
    build_zumbach,
    family_design_matrix,
    family_from_name,
    positivity_check,
    read_kernel,
    sigma2,
    sigma2_path,
    write_kernel,
)
from ape_qarch.moments import long_memory_profile


def brute_force_sigma2(kernel, window):
    value = kernel.s2
    for a in range(kernel.q):
        value += kernel.L[a] * window[a]
        for b in range(kernel.q):
            value += kernel.K[a, b] * window[a] * window[b]

    return value


def test_arch_scalar():
    kernel = build_arch([0.5], s2=0.5)
    np.testing.assert_array_equal(kernel.K, [[0.5]])
    assert sigma2(kernel, [1.0]) == 1.0


def test_zero_kernel_is_baseline(rng):
    kernel = build_arch([0.0] * 4, s2=0.21)
    assert sigma2(kernel, rng.normal(size=4)) == pytest.approx(0.21)


def test_arch_with_leverage_scalar():
    kernel = build_arch([0.3], s2=0.2, L=[-0.1])
    assert sigma2(kernel, [2.0]) == pytest.approx(0.2 - 0.2 + 1.2)


def test_sigma2_matches_double_loop(rng):
    K = rng.normal(size=(3, 3))
    kernel = FeedbackKernel(q=3, s2=0.4, L=rng.normal(size=3), K=K + K.T)
    window = rng.normal(size=3)
    assert sigma2(kernel, window) == pytest.approx(brute_force_sigma2(kernel, window), rel=1e-12)


def test_sigma2_path_matches_pointwise(arch_kernel, rng):
    returns = rng.normal(size=40)
    path = sigma2_path(arch_kernel, returns)
    assert path.shape == (40 - arch_kernel.q,)
    for i, value in enumerate(path):
        t = arch_kernel.q + i
        window = returns[t - arch_kernel.q : t][::-1]
        assert value == pytest.approx(sigma2(arch_kernel, window), rel=1e-12)


def test_sigma2_short_window(arch_kernel):
    with pytest.raises(KernelError, match="Window needs"):
        sigma2(arch_kernel, [1.0, 2.0])


def test_kernel_validation():
    with pytest.raises(KernelError, match="symmetric"):
        FeedbackKernel(q=2, s2=1.0, K=[[0.1, 0.2], [0.0, 0.1]])

    with pytest.raises(KernelError, match="non-negative"):
        build_arch([0.1], s2=-1.0)

    with pytest.raises(KernelError, match="length"):
        build_arch([0.1, 0.2], s2=1.0, L=[0.1])


def test_kernel_is_read_only(arch_kernel):
    with pytest.raises(ValueError):
        arch_kernel.K[0, 0] = 1.0


def test_figarch_trace_and_profile():
    kernel = build_figarch(0.081, 1.11, 53.0, 100, s2=0.21)
    tau = np.arange(1, 101)
    np.testing.assert_allclose(kernel.diagonal, 0.081 * tau**-1.11 * np.exp(-tau / 53))
    assert kernel.is_diagonal
    assert 0.1 < kernel.trace < 0.5


def test_arch_trace_from_differenced_profile():
    profile = long_memory_profile(100)
    k = -np.diff(np.concatenate(([1.0], profile)))
    kernel = build_arch(k, s2=profile[-1])
    assert kernel.trace == pytest.approx(1 - profile[-1])
    assert kernel.trace == pytest.approx(0.7228, abs=1e-3)
    assert kernel.is_diagonal


def test_two_scale_q2():
    kernel = build_two_scale([0.1, 0.2], [0.05], s2=1.0)
    np.testing.assert_allclose(kernel.K, [[0.15, 0.05], [0.05, 0.25]])


def test_two_scale_without_second_scale_is_arch():
    kernel = build_two_scale([0.1, 0.2, 0.3], [0.0, 0.0], s2=0.4)
    np.testing.assert_array_equal(kernel.K, build_arch([0.1, 0.2, 0.3], s2=0.4).K)


def test_two_scale_expansion(rng):
    g1, g2 = rng.uniform(0, 0.1, 3), rng.uniform(0, 0.1, 2)
    kernel = build_two_scale(g1, g2, s2=0.0)
    window = rng.normal(size=3)
    expected = g1 @ window**2 + sum(g2[i] * (window[i] + window[i + 1]) ** 2 for i in range(2))
    assert kernel.quadratic_form(window) == pytest.approx(expected, rel=1e-12)


def test_multi_scale_expansion(rng):
    g = [rng.uniform(0, 0.1, 4), rng.uniform(0, 0.1, 3), rng.uniform(0, 0.1, 2)]
    kernel = build_multi_scale(g, s2=0.0)
    window = rng.normal(size=4)
    expected = sum(
        g[ell - 1][start] * window[start : start + ell].sum() ** 2
        for ell in range(1, 4)
        for start in range(4 - ell + 1)
    )
    assert kernel.quadratic_form(window) == pytest.approx(expected, rel=1e-12)


def test_bb_q2():
    kernel = build_bb([0.1, 0.2], s2=1.0)
    np.testing.assert_allclose(kernel.K, [[0.3, 0.2], [0.2, 0.2]])


def test_bb_single_day_is_arch1():
    kernel = build_bb([1.0, 0.0, 0.0], s2=1.0)
    np.testing.assert_array_equal(kernel.K, np.diag([1.0, 0.0, 0.0]))


def test_bb_expansion(rng):
    g_bb = rng.uniform(0, 0.1, 4)
    kernel = build_bb(g_bb, s2=0.0)
    window = rng.normal(size=4)
    expected = sum(g_bb[ell - 1] * window[:ell].sum() ** 2 for ell in range(1, 5))
    assert kernel.quadratic_form(window) == pytest.approx(expected, rel=1e-12)


def test_zumbach_q2():
    kernel = build_zumbach([0.1, 0.2], [0.3], s2=1.0)
    # K(1,2) + K(2,1) carries the full cross coefficient.
    assert 2 * kernel.K[0, 1] == pytest.approx(0.3)


def test_zumbach_without_trend_is_arch():
    kernel = build_zumbach([0.1, 0.2, 0.3, 0.1], [0.0, 0.0], s2=0.5)
    assert kernel.is_diagonal


def test_zumbach_expansion(rng):
    g_z = rng.uniform(-0.1, 0.1, 3)
    kernel = build_zumbach(np.zeros(6), g_z, s2=0.0)
    window = rng.normal(size=6)
    expected = sum(
        g_z[ell - 1] * window[:ell].sum() * window[ell : 2 * ell].sum() for ell in range(1, 4)
    )
    assert kernel.quadratic_form(window) == pytest.approx(expected, rel=1e-12)


def test_long_trend_q2():
    kernel = build_long_trend([0.0, 0.0], [0.4], s2=0.0)
    assert kernel.quadratic_form([2.0, 3.0]) == pytest.approx(0.4 * 6.0)


def test_long_trend_direct_sum(rng):
    diag, g_lt = rng.uniform(0, 0.1, 5), rng.uniform(-0.1, 0.1, 4)
    kernel = build_long_trend(diag, g_lt, s2=0.3)
    window = rng.normal(size=5)
    expected = 0.3 + diag @ window**2 + window[0] * (g_lt @ window[1:])
    assert sigma2(kernel, window) == pytest.approx(expected, rel=1e-12)


def test_unconstrained_round_trip(rng):
    k, k_off = rng.uniform(0, 0.1, 4), rng.normal(0, 0.01, 6)
    kernel = build_unconstrained(k, k_off, s2=0.5)
    np.testing.assert_allclose(kernel.off_diagonal(), k_off)
    np.testing.assert_allclose(kernel.diagonal, k)


def test_positivity_diagonal():
    report = positivity_check(build_arch([0.2, 0.1], s2=0.3))
    assert report.definite
    assert report.margin == pytest.approx(1.2)


def test_positivity_with_leverage():
    kernel = build_arch([0.2, 0.1], s2=0.3, L=[-0.1, -0.05])
    report = positivity_check(kernel)
    assert report.definite
    assert report.margin == pytest.approx(1.2 - (0.01 / 0.2 + 0.0025 / 0.1))


def test_positivity_negative_eigenvalue():
    kernel = FeedbackKernel(q=2, s2=1.0, K=[[0.1, 0.3], [0.3, 0.1]])
    assert not positivity_check(kernel).definite


def test_positivity_singular_with_leverage():
    kernel = build_arch([0.2, 0.0], s2=0.3, L=[-0.1, 0.1])
    report = positivity_check(kernel)
    assert not report.quadratic_test_applicable
    assert report.margin is None


def test_arch_design_is_identity_on_diagonal():
    design = family_design_matrix(FamilySpec(family=FamilyTag.ARCH, q=3))
    np.testing.assert_array_equal(design.apply([0.1, 0.2, 0.3]), np.diag([0.1, 0.2, 0.3]))
    assert design.diagonal_rows.all()


@pytest.mark.parametrize(
    "name",
    [
        "ARCH",
        "TwoScale",
        "MultiScale:2",
        "BB",
        "BB-mixed",
        "Zumbach",
        "LongTrend",
        "Composite:TwoScale+LongTrend",
        "Composite:BB+Zumbach",
        "Unconstrained",
    ],
)
@pytest.mark.parametrize("q", [2, 5, 8])
def test_design_matrix_reproduces_builder(name, q, rng):
    spec = family_from_name(name, q)
    for _ in range(5):
        filled = spec.with_flat_params(rng.normal(0, 0.1, spec.n_params))
        design = family_design_matrix(spec)
        np.testing.assert_allclose(
            design.apply(filled.flat_params()), build_from_spec(filled).K, atol=1e-14
        )


def test_figarch_has_no_design_matrix():
    with pytest.raises(KernelError, match="non-linear"):
        family_design_matrix(FamilySpec(family=FamilyTag.FIGARCH_DIAG, q=4))


def test_off_diagonal_part_drops_free_diagonal():
    design = family_design_matrix(family_from_name("LongTrend", 4)).off_diagonal_part()
    assert design.labels == ("g_lt(1)", "g_lt(2)", "g_lt(3)")


def test_family_from_name():
    spec = family_from_name("Composite:TwoScale+LongTrend", 5)
    assert spec.components == (FamilyTag.TWO_SCALE, FamilyTag.LONG_TREND)
    assert family_from_name("MultiScale:2", 5).scales == 2

    with pytest.raises(KernelError, match="Unknown family"):
        family_from_name("GARCH", 5)

    with pytest.raises(KernelError, match="no qualifier"):
        family_from_name("BB:2", 5)

    with pytest.raises(KernelError, match="cannot be a Composite"):
        family_from_name("Composite:ARCH", 5)


def test_missing_family_parameter():
    with pytest.raises(KernelError, match="missing parameter 'g2'"):
        FamilySpec(family=FamilyTag.TWO_SCALE, q=3, params={"g1": [0.1, 0.1, 0.1]})


def test_kernel_file_round_trip(tmp_path, rng):
    K = rng.normal(0, 0.1, size=(4, 4))
    kernel = FeedbackKernel(q=4, s2=0.123456789, L=rng.normal(size=4), K=K + K.T)
    path = write_kernel(kernel, tmp_path / "kernel.csv")
    loaded = read_kernel(path)
    assert loaded.s2 == kernel.s2
    np.testing.assert_array_equal(loaded.L, kernel.L)
    np.testing.assert_array_equal(loaded.K, kernel.K)


def test_read_kernel_row_mismatch(tmp_path):
    path = tmp_path / "kernel.csv"
    path.write_text("q,2\ns2,1\nL,0,0\nK,0.1,0\n", encoding="utf8")
    with pytest.raises(KernelError, match="declares q=2"):
        read_kernel(path)


def test_truncated(arch_kernel):
    truncated = arch_kernel.truncated(2)
    np.testing.assert_array_equal(truncated.diagonal, arch_kernel.diagonal[:2])
    with pytest.raises(KernelError):
        arch_kernel.truncated(9)


@pytest.mark.fuzzing
@given(
    k=st.lists(st.floats(0.01, 0.4), min_size=1, max_size=4),
    leverage=st.floats(-0.5, 0.5),
    window=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
)
@settings(max_examples=200, deadline=None)
def test_positive_kernels_give_nonnegative_sigma2(k, leverage, window):
    q = len(k)
    kernel = build_arch(k, s2=0.3, L=[leverage] + [0.0] * (q - 1))
    if positivity_check(kernel).definite:
        assert sigma2(kernel, window[:q]) >= -1e-9
