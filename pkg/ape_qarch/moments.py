"""
Closed-form and linear-system moments of QARCH processes: stationarity,
fourth-moment existence, kurtosis and long-memory laws.
"""

import math
from collections.abc import Sequence
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
import pandas as pd
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import zeta

from ape_qarch._utils import ResidualLaw, as_float_array
from ape_qarch.exceptions import MomentError
from ape_qarch.kernel import FeedbackKernel, build_arch

if TYPE_CHECKING:
    from ape_qarch.correlators import CorrelationSet

RCOND_THRESHOLD = 1e-12
INFINITE_Q_TRUNCATION = 4096
FRONTIER_DELTA = 1e-6
BISECTION_TOLERANCE = 1e-10
MAX_BISECTIONS = 200
MAX_GENERAL_Q = 60
"""Largest horizon of the dense fourth-moment system, of order q^2 / 2."""

Horizon = Union[int, float]


class ResidualSpec(BaseModel):
    """
    Unit-variance residual law. ``xi4`` is its fourth moment.
    """

    model_config = ConfigDict(frozen=True)

    law: ResidualLaw = ResidualLaw.GAUSSIAN
    nu: Optional[float] = None
    xi4: float = 3.0

    @model_validator(mode="before")
    @classmethod
    def compute_xi4(cls, values):
        if not isinstance(values, dict):
            return values

        law = ResidualLaw(values.get("law", ResidualLaw.GAUSSIAN))
        nu = values.get("nu")
        if law == ResidualLaw.STUDENT:
            if nu is None or nu <= 2:
                raise MomentError(f"Student residuals need nu > 2, got {nu}.")

            default_xi4 = 3 * (nu - 2) / (nu - 4) if nu > 4 else math.inf
        else:
            default_xi4 = 3.0

        xi4 = values.get("xi4") or default_xi4
        if xi4 < 1:
            raise MomentError(f"Residual fourth moment must be at least 1, got {xi4}.")

        return {**values, "law": law, "xi4": xi4}

    @classmethod
    def gaussian(cls) -> "ResidualSpec":
        return cls(law=ResidualLaw.GAUSSIAN)

    @classmethod
    def student(cls, nu: float) -> "ResidualSpec":
        return cls(law=ResidualLaw.STUDENT, nu=nu)

    def __str__(self) -> str:
        return f"student({self.nu})" if self.law == ResidualLaw.STUDENT else "gaussian"


class MomentReport(BaseModel):
    """
    Second and fourth moments of the volatility. ``None`` marks a divergent moment.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigma2_mean: Optional[float]
    stable2: bool
    sigma4_mean: Optional[float] = None
    stable4: Optional[bool] = None
    kurtosis: Optional[float] = None
    c2_theory: Optional[np.ndarray] = None
    """``C2(tau)`` for ``tau = 1..q``."""

    d_theory: Optional[np.ndarray] = None
    """``D(x, y)`` for ``x, y = 1..q`` with ``D(x, x) = C2(x)``."""

    det_sign: Optional[float] = None
    rcond: Optional[float] = None

    @property
    def sigma4_ratio(self) -> Optional[float]:
        if self.sigma4_mean is None or not self.sigma2_mean:
            return None

        return self.sigma4_mean / self.sigma2_mean**2


class AsymptoticLaw(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon: float
    beta: float
    alpha: float
    B: Optional[float] = None


class AlphaCriticalResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    qs: tuple[int, ...]
    alphas: tuple[float, ...]
    """Per-horizon crossing of the fourth-moment and stationarity frontiers."""

    alpha_c: float
    """Value extrapolated linearly in ``1/q``."""

    g_c: float
    """``1 / zeta(alpha_c)``."""


def kurtosis(sigma2_mean: float, sigma4_mean: float, residual: ResidualSpec) -> float:
    return residual.xi4 * sigma4_mean / sigma2_mean**2 - 3


def second_moment(
    kernel: FeedbackKernel, residual: Optional[ResidualSpec] = None
) -> MomentReport:
    """
    Mean squared volatility ``s2 / (1 - tr K)``, divergent when ``tr K >= 1``.
    """
    trace = kernel.trace
    if trace >= 1:
        return MomentReport(sigma2_mean=None, stable2=False)

    return MomentReport(sigma2_mean=kernel.s2 / (1 - trace), stable2=True)


def zeta_sum(alpha: float, q: Horizon) -> float:
    """
    ``sum_{tau=1}^{q} tau^-alpha``; infinite when the series diverges.
    """
    if math.isinf(q):
        return float(zeta(alpha, 1)) if alpha > 1 else math.inf

    q = int(q)
    if q > INFINITE_Q_TRUNCATION and alpha > 1:
        # Hurwitz tail beyond q.
        return float(zeta(alpha, 1) - zeta(alpha, q + 1))

    return float(np.sum(np.arange(1, q + 1, dtype=float) ** (-alpha)))


def critical_g(alpha: float, q: Horizon) -> float:
    """
    Largest amplitude ``g`` of ``k(tau) = g tau^-alpha`` that is stationary.
    """
    if alpha <= 0:
        raise MomentError(f"Exponent alpha must be positive, got {alpha}.")

    elif not math.isinf(q) and q < 1:
        raise MomentError(f"Horizon q must be at least 1, got {q}.")

    total = zeta_sum(alpha, q)
    return 0.0 if math.isinf(total) else 1.0 / total


def nabla_matrix(k: np.ndarray, xi4: float) -> np.ndarray:
    """
    ``nabla(tau, j) = delta - xi4 k(tau) k(j) - [k(tau - j) + k(tau + j)]``
    with ``k(tau) = 0`` outside ``1..q``.
    """
    q = k.size
    padded = np.concatenate((np.zeros(q), k, np.zeros(2 * q + 1)))

    def at(lag):
        return padded[lag + q - 1]

    tau = np.arange(1, q + 1)[:, None]
    j = np.arange(1, q + 1)[None, :]
    return np.eye(q) - xi4 * np.outer(k, k) - (at(tau - j) + at(tau + j))


def _solve_checked(
    matrix: np.ndarray, rhs: np.ndarray
) -> tuple[Optional[np.ndarray], float, float]:
    sign, _ = np.linalg.slogdet(matrix)
    rcond = 1.0 / np.linalg.cond(matrix)
    if sign <= 0 or not np.isfinite(rcond) or rcond < RCOND_THRESHOLD:
        return None, float(sign), float(rcond)

    return np.linalg.solve(matrix, rhs), float(sign), float(rcond)


def _diagonal_inputs(
    k: Sequence[float], s2: Optional[float]
) -> tuple[np.ndarray, Optional[float]]:
    diag = as_float_array(k, "k", MomentError)
    trace = float(diag.sum())
    if trace >= 1:
        return diag, None

    # Without a baseline, normalize to <sigma2> = 1.
    return diag, 1.0 if s2 is None else s2 / (1 - trace)


def fourth_moment_diag(
    k: Sequence[float], residual: Optional[ResidualSpec] = None, s2: Optional[float] = None
) -> MomentReport:
    """
    Fourth moment of a purely diagonal kernel by solving ``nabla C2 = S``.

    Args:
        k (Sequence[float]): Diagonal ``k(1..q)``.
        residual (Optional[ResidualSpec]): Residual law, Gaussian by default.
        s2 (Optional[float]): Baseline. When omitted ``<sigma2>`` is set to 1.

    Returns:
        :class:`MomentReport`
    """
    residual = residual or ResidualSpec.gaussian()
    diag, m = _diagonal_inputs(k, s2)
    if m is None:
        return MomentReport(sigma2_mean=None, stable2=False, stable4=False)

    if math.isinf(residual.xi4):
        return MomentReport(sigma2_mean=m, stable2=True, stable4=False)

    nabla = nabla_matrix(diag, residual.xi4)
    source = diag * m**2 * (residual.xi4 - 1)
    c2, sign, rcond = _solve_checked(nabla, source)
    if c2 is None:
        logger.debug(f"Fourth moment diverges (det sign {sign}, rcond {rcond:.3g}).")
        return MomentReport(
            sigma2_mean=m, stable2=True, stable4=False, det_sign=sign, rcond=rcond
        )

    sigma4 = float(m**2 + diag @ c2)
    stable4 = sigma4 >= m**2 * (1 - 1e-12)
    return MomentReport(
        sigma2_mean=m,
        stable2=True,
        sigma4_mean=sigma4 if stable4 else None,
        stable4=stable4,
        kurtosis=kurtosis(m, sigma4, residual) if stable4 else None,
        c2_theory=c2,
        det_sign=sign,
        rcond=rcond,
    )


def _pair_index(q: int) -> dict[tuple[int, int], int]:
    """
    Unknown index of ``D(x, y)`` keyed by ``(max, min)``, after ``sigma4`` and ``C2(1..q)``.
    """
    index = {}
    for x in range(2, q + 1):
        for y in range(1, x):
            index[(x, y)] = 1 + q + len(index)

    return index


def fourth_moment_general(
    kernel: FeedbackKernel, residual: Optional[ResidualSpec] = None
) -> MomentReport:
    """
    Jointly solve for ``<sigma4>``, ``C2(tau)`` and ``D(tau1, tau2)`` with a full kernel.
    Leverage is ignored.
    """
    if kernel.q > MAX_GENERAL_Q:
        raise MomentError(
            f"Fourth moment of a non-diagonal kernel is limited to q <= {MAX_GENERAL_Q}, "
            f"got q={kernel.q}."
        )

    residual = residual or ResidualSpec.gaussian()
    if kernel.has_leverage:
        logger.warning("Fourth-moment system ignores the leverage kernel L.")

    report = second_moment(kernel)
    if not report.stable2 or report.sigma2_mean is None:
        return MomentReport(sigma2_mean=None, stable2=False, stable4=False)

    if math.isinf(residual.xi4):
        return MomentReport(sigma2_mean=report.sigma2_mean, stable2=True, stable4=False)

    m = report.sigma2_mean
    q = kernel.q
    K = kernel.K
    k = np.diag(K)
    xi4 = residual.xi4
    pairs = _pair_index(q)
    size = 1 + q + len(pairs)
    A = np.zeros((size, size))
    rhs = np.zeros(size)

    def d(x: int, y: int) -> int:
        return pairs[(max(x, y), min(x, y))]

    # sigma4 - sum k C2 - 2 sum K D = m^2
    A[0, 0] = 1.0
    A[0, 1 : q + 1] -= k
    for (a, b), col in pairs.items():
        A[0, col] -= 2 * K[a - 1, b - 1]
    rhs[0] = m**2

    for tau in range(1, q + 1):
        row = tau
        A[row, tau] += 1.0
        A[row, 0] -= k[tau - 1] * xi4
        for a in range(1, q + 1):
            if a != tau:
                A[row, abs(tau - a)] -= k[a - 1]

        for c in range(tau + 2, q + 1):
            for dd in range(tau + 1, c):
                A[row, d(c - tau, dd - tau)] -= 2 * K[c - 1, dd - 1]

        rhs[row] = -k[tau - 1] * m**2

    for (a, b), row in pairs.items():
        A[row, row] += 1.0
        A[row, a - b] -= 2 * K[a - 1, b - 1]
        for e in range(1, b):
            A[row, d(a - e, b - e)] -= k[e - 1]

        for f in range(b + 1, q + 1):
            if f != a:
                A[row, d(a - b, f - b)] -= 2 * K[f - 1, b - 1]

        rhs[row] = 2 * K[a - 1, b - 1] * m**2

    solution, sign, rcond = _solve_checked(A, rhs)
    if solution is None:
        return MomentReport(
            sigma2_mean=m, stable2=True, stable4=False, det_sign=sign, rcond=rcond
        )

    sigma4 = float(solution[0])
    c2 = solution[1 : q + 1].copy()
    grid = np.diag(c2)
    for (x, y), col in pairs.items():
        grid[x - 1, y - 1] = grid[y - 1, x - 1] = solution[col]

    stable4 = sigma4 >= m**2 * (1 - 1e-12)
    return MomentReport(
        sigma2_mean=m,
        stable2=True,
        sigma4_mean=sigma4 if stable4 else None,
        stable4=stable4,
        kurtosis=kurtosis(m, sigma4, residual) if stable4 else None,
        c2_theory=c2,
        d_theory=grid,
        det_sign=sign,
        rcond=rcond,
    )


def fourth_moment(
    kernel: FeedbackKernel, residual: Optional[ResidualSpec] = None
) -> MomentReport:
    if kernel.is_diagonal:
        return fourth_moment_diag(kernel.diagonal, residual, s2=kernel.s2)

    return fourth_moment_general(kernel, residual)


def theoretical_c2(
    kernel: FeedbackKernel, residual: Optional[ResidualSpec] = None, max_lag: Optional[int] = None
) -> Optional[np.ndarray]:
    """
    ``C2(tau)`` for ``tau = 0..max_lag``; beyond ``q`` it follows
    ``C2(tau) = sum_a k(a) C2(tau - a)``. ``C2(0) = xi4 <sigma4> - <sigma2>^2``.
    """
    residual = residual or ResidualSpec.gaussian()
    report = fourth_moment(kernel, residual)
    if not report.stable4 or report.c2_theory is None or report.sigma4_mean is None:
        return None

    max_lag = kernel.q if max_lag is None else max_lag
    m = report.sigma2_mean or 0.0
    k = kernel.diagonal
    values = np.zeros(max(max_lag, kernel.q) + 1)
    values[0] = residual.xi4 * report.sigma4_mean - m**2
    values[1 : kernel.q + 1] = report.c2_theory
    for tau in range(kernel.q + 1, values.size):
        values[tau] = k @ values[tau - 1 : tau - kernel.q - 1 : -1]

    return values[: max_lag + 1]


def theoretical_correlations(
    kernel: FeedbackKernel,
    residual: Optional[ResidualSpec] = None,
    max_lag: Optional[int] = None,
    max_lag_d: Optional[int] = None,
) -> "CorrelationSet":
    """
    Exact correlation functions of a leverage-free QARCH, packaged like the
    empirical estimates so that they can be fed to GMM.
    """
    from ape_qarch.correlators import CorrelationSet

    residual = residual or ResidualSpec.gaussian()
    if kernel.has_leverage:
        raise MomentError("Theoretical correlations require L = 0.")

    max_lag = kernel.q if max_lag is None else max_lag
    c2 = theoretical_c2(kernel, residual, max_lag)
    report = fourth_moment(kernel, residual)
    if c2 is None or report.sigma2_mean is None:
        raise MomentError("Fourth moment diverges; correlations are undefined.")

    m = report.sigma2_mean
    signed = np.concatenate((c2[:0:-1], c2))
    c1 = np.zeros(2 * max_lag + 1)
    c1[max_lag] = m
    n_d = min(max_lag if max_lag_d is None else max_lag_d, kernel.q)
    d = np.zeros((n_d + 1, n_d + 1))
    d[0, 0] = c2[0]
    if report.d_theory is not None:
        d[1:, 1:] = report.d_theory[:n_d, :n_d]
    else:
        d[1:, 1:] = np.diag(c2[1 : n_d + 1])

    zeros = np.zeros(2 * max_lag + 1)
    return CorrelationSet(
        max_lag=max_lag,
        max_lag_d=n_d,
        mean_r2=m,
        c1=c1,
        c2=signed,
        lev=zeros,
        lev_a=zeros,
        d=d,
    )


def perturbative_sigma4(
    g: float, alpha: float, residual: Optional[ResidualSpec] = None, q: Horizon = math.inf
) -> float:
    """
    Lowest order ``<sigma4>/<sigma2>^2 = 1 + (xi4 - 1) g^2 sum tau^(-2 alpha)``.
    Returns ``inf`` when the sum diverges.
    """
    residual = residual or ResidualSpec.gaussian()
    if math.isinf(q) and 2 * alpha <= 1:
        return math.inf

    return 1 + (residual.xi4 - 1) * g**2 * zeta_sum(2 * alpha, q)


def figarch_beta(epsilon: float) -> float:
    """
    Correlation exponent ``beta = 1 - 2 epsilon`` of a critical long-memory ARCH
    with ``k(tau) ~ g / tau^(1 + epsilon)``.
    """
    if not 0 < epsilon < 0.5:
        raise MomentError(f"The long-memory law holds for 0 < epsilon < 1/2, got {epsilon}.")

    return 1 - 2 * epsilon


def asymptotic_law(epsilon: float, B: Optional[float] = None) -> AsymptoticLaw:
    return AsymptoticLaw(epsilon=epsilon, beta=figarch_beta(epsilon), alpha=1 + epsilon, B=B)


def _det_sign(k: np.ndarray, xi4: float) -> float:
    sign, _ = np.linalg.slogdet(nabla_matrix(k, xi4))
    return float(sign)


def fourth_moment_frontier(
    k_shape: Sequence[float], residual: Optional[ResidualSpec] = None
) -> float:
    """
    Amplitude ``g`` along ``g * k_shape`` at which the fourth moment diverges.
    Returns the stationarity bound when it never does.
    """
    residual = residual or ResidualSpec.gaussian()
    shape = as_float_array(k_shape, "k_shape", MomentError)
    g_max = 1.0 / float(shape.sum())
    hi = g_max * (1 - FRONTIER_DELTA)
    if _det_sign(hi * shape, residual.xi4) > 0:
        return g_max

    lo = 0.0
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if _det_sign(mid * shape, residual.xi4) > 0:
            lo = mid
        else:
            hi = mid

        if hi - lo < BISECTION_TOLERANCE:
            break

    return 0.5 * (lo + hi)


def _power_law(alpha: float, q: int) -> np.ndarray:
    return np.arange(1, q + 1, dtype=float) ** (-alpha)


def _moment_exists_at_criticality(alpha: float, q: int, xi4: float) -> bool:
    g = critical_g(alpha, q) * (1 - FRONTIER_DELTA)
    return _det_sign(g * _power_law(alpha, q), xi4) > 0


def critical_alpha(
    q: int,
    residual: Optional[ResidualSpec] = None,
    bracket: tuple[float, float] = (1.0, 3.0),
) -> float:
    """
    Exponent above which the fourth moment of ``g_c tau^-alpha`` diverges
    before stationarity is lost, at horizon ``q``.
    """
    residual = residual or ResidualSpec.gaussian()
    lo, hi = bracket
    low_ok = _moment_exists_at_criticality(lo, q, residual.xi4)
    high_ok = _moment_exists_at_criticality(hi, q, residual.xi4)
    if low_ok == high_ok:
        raise MomentError(
            f"Bracket {bracket} does not isolate the critical exponent at q={q} "
            f"(fourth moment {'exists' if low_ok else 'diverges'} at both ends)."
        )

    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if _moment_exists_at_criticality(mid, q, residual.xi4) == low_ok:
            lo = mid
        else:
            hi = mid

        if hi - lo < BISECTION_TOLERANCE:
            break

    return 0.5 * (lo + hi)


def alpha_c(
    q_list: Sequence[int],
    residual: Optional[ResidualSpec] = None,
    bracket: tuple[float, float] = (1.0, 3.0),
) -> AlphaCriticalResult:
    """
    Critical exponent per horizon, extrapolated to ``q = inf`` linearly in ``1/q``.
    """
    qs = tuple(int(q) for q in q_list)
    if len(qs) < 2 or any(b <= a for a, b in zip(qs, qs[1:])):
        raise MomentError("alpha_c needs at least two increasing horizons.")

    alphas = tuple(critical_alpha(q, residual, bracket) for q in qs)
    for q, alpha in zip(qs, alphas):
        logger.debug(f"Critical exponent at q={q}: {alpha:.6f}")

    _, intercept = np.polyfit(1.0 / np.array(qs, dtype=float), np.array(alphas), 1)
    return AlphaCriticalResult(
        qs=qs,
        alphas=alphas,
        alpha_c=float(intercept),
        g_c=critical_g(float(intercept), math.inf),
    )


def frontier_scan(
    alphas: Sequence[float],
    qs: Sequence[Horizon],
    residual: Optional[ResidualSpec] = None,
    infinite_q: int = INFINITE_Q_TRUNCATION,
) -> pd.DataFrame:
    """
    Stationarity and fourth-moment frontiers of ``g tau^-alpha`` on a grid.
    Infinite horizons use the exact zeta function for ``g_c`` and a
    truncation at ``infinite_q`` for ``g_4``.
    """
    rows = []
    for q in qs:
        q_eff = infinite_q if math.isinf(q) else int(q)
        for alpha in alphas:
            g_c = critical_g(alpha, q)
            if g_c == 0:
                g_4 = 0.0
            else:
                g_4 = min(g_c, fourth_moment_frontier(_power_law(alpha, q_eff), residual))

            rows.append({"alpha": alpha, "q": q, "g_c": g_c, "g_4": g_4})

    return pd.DataFrame(rows, columns=["alpha", "q", "g_c", "g_4"])


LONG_MEMORY_PROFILE = (0.21, 1.11, 0.081, 53.0)
"""``(s_inf2, alpha, g, q0)`` of the fitted baseline profile ``s2(q)``."""


def long_memory_profile(q: int) -> np.ndarray:
    """
    ``s2(tau) = s_inf2 + g tau^(1 - alpha) / (alpha - 1) exp(-tau / q0)`` at ``tau = 1..q``.
    """
    s_inf2, alpha, g, q0 = LONG_MEMORY_PROFILE
    tau = np.arange(1, q + 1, dtype=float)
    return s_inf2 + g * tau ** (1 - alpha) / (alpha - 1) * np.exp(-tau / q0)


def long_memory_reference(q: int = 512) -> FeedbackKernel:
    """
    The long-memory diagonal ``k(tau) = s2(tau - 1) - s2(tau)`` with ``s2(0) = 1``,
    obtained by differencing the fitted baseline profile. The trace is ``1 - s2(q)``
    and the baseline ``s2(q)`` gives ``<sigma2> = 1``.
    """
    if q < 1:
        raise MomentError(f"Horizon q must be at least 1, got {q}.")

    profile = long_memory_profile(q)
    k = -np.diff(np.concatenate(([1.0], profile)))
    return build_arch(k, s2=float(profile[-1]))


def omega_tri_correction(
    k: Sequence[float], c_omega: Sequence[float], max_tau: int
) -> np.ndarray:
    """
    Shift of the integrated time-reversal asymmetry caused by a stochastic
    baseline with autocorrelation ``c_omega`` (indexed by ``|lag|``):
    ``-sum_{tau''<=tau} sum_{tau'} k(tau') [C(tau' - tau'') - C(tau' + tau'')]``.

    Returns:
        ``np.ndarray``: Values at ``tau = 0..max_tau``.
    """
    k = as_float_array(k, "k", MomentError)
    c_omega = as_float_array(c_omega, "c_omega", MomentError)
    q = k.shape[0]
    if c_omega.shape[0] < q + max_tau + 1:
        raise MomentError(
            f"C_omega must cover lags up to {q + max_tau}, got {c_omega.shape[0] - 1}."
        )

    lags = np.arange(1, q + 1)
    per_lag = np.array(
        [k @ (c_omega[np.abs(lags - tau)] - c_omega[lags + tau]) for tau in range(1, max_tau + 1)]
    )
    return np.concatenate(([0.0], -np.cumsum(per_lag)))
