"""
Auxiliary fits around a calibrated kernel: the baseline profile ``s2(q)``,
the residual degrees of freedom and ex-post residual checks.
"""

from collections.abc import Sequence
from typing import Optional

import numpy as np
from ape.logging import logger
from pydantic import BaseModel, ConfigDict
from scipy.optimize import least_squares, minimize_scalar
from scipy.special import gammaln

from ape_qarch._utils import as_float_array
from ape_qarch.exceptions import EstimationError, FitError
from ape_qarch.kernel import FeedbackKernel, sigma2_path

NU_BOUNDS = (2.05, 50.0)
BOUNDARY_TOLERANCE = 1e-2
FLAG_SIGMAS = 3.0


class ProfileFit(BaseModel):
    """
    ``s2(q) = s_inf2 + g q^(1 - alpha) / (alpha - 1) exp(-q / q0)``.
    """

    s_inf2: float
    alpha: float
    g: float
    q0: float
    residual: float

    def evaluate(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return self.s_inf2 + self.g * q ** (1 - self.alpha) / (self.alpha - 1) * np.exp(
            -q / self.q0
        )


class NuFit(BaseModel):
    nu: float
    loglik: float
    """Mean Student log-density of the residuals at ``nu``."""

    at_boundary: bool


class ResidualDiagnostics(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lags: np.ndarray
    values: np.ndarray
    """Lagged covariance of squared residuals."""

    se: np.ndarray
    flagged: np.ndarray
    """Lags whose value departs from zero by more than three standard errors."""


def s2_profile(k: Sequence[float], mean_sigma2: float = 1.0) -> np.ndarray:
    """
    ``s2(q) = <sigma2> (1 - sum_{tau <= q} k(tau))`` for ``q = 1..len(k)``.
    """
    k = as_float_array(k, "k", FitError)
    return mean_sigma2 * (1 - np.cumsum(k))


def fit_profile_curve(qs: Sequence[float], values: Sequence[float]) -> ProfileFit:
    """
    Least-squares fit of the baseline profile over several starting points.
    """
    q = as_float_array(qs, "qs", FitError)
    y = as_float_array(values, "values", FitError, length=q.shape[0])
    if q.shape[0] < 5:
        raise FitError("Need at least 5 horizons to fit the baseline profile.")

    def residuals(p):
        s_inf2, alpha, g, q0 = p
        return s_inf2 + g * q ** (1 - alpha) / (alpha - 1) * np.exp(-q / q0) - y

    lower = [0.0, 1.0 + 1e-4, 0.0, 1e-2]
    upper = [1.0, 5.0, 10.0, 1e3 * q[-1]]
    floor = float(np.clip(y[-1], 0.0, 1.0))
    best = None
    for alpha in (1.1, 1.3, 1.6):
        for q0 in (q[-1] / 50, q[-1] / 10, q[-1] / 2):
            start = [floor, alpha, 0.1, max(q0, 1.0)]
            result = least_squares(residuals, start, bounds=(lower, upper), max_nfev=5000)
            if best is None or result.cost < best.cost:
                best = result

    if best is None or best.status <= 0:
        raise FitError("Baseline profile fit did not converge.")

    s_inf2, alpha, g, q0 = best.x
    residual = float(np.sqrt(np.mean(best.fun**2)))
    return ProfileFit(s_inf2=s_inf2, alpha=alpha, g=g, q0=q0, residual=residual)


def fit_s2_profile(k: Sequence[float], mean_sigma2: float = 1.0) -> ProfileFit:
    """
    Fit the baseline profile implied by a long diagonal ``k``.
    """
    profile = s2_profile(k, mean_sigma2)
    return fit_profile_curve(np.arange(1, profile.shape[0] + 1), profile)


def student_log_density(x: np.ndarray, nu: float) -> np.ndarray:
    """
    Log-density of the unit-variance Student distribution.
    """
    scale = nu - 2
    return (
        gammaln((nu + 1) / 2)
        - gammaln(nu / 2)
        - 0.5 * np.log(np.pi * scale)
        - (nu + 1) / 2 * np.log1p(x * x / scale)
    )


def fit_student_nu(residuals: Sequence[float], bounds: tuple[float, float] = NU_BOUNDS) -> NuFit:
    """
    Maximum-likelihood degrees of freedom of unit-variance Student residuals.
    A maximum on the search boundary is flagged.
    """
    x = as_float_array(residuals, "residuals", EstimationError)
    if x.shape[0] == 0:
        raise EstimationError("No residuals to fit.")

    result = minimize_scalar(
        lambda nu: -float(np.mean(student_log_density(x, nu))),
        bounds=bounds,
        method="bounded",
        options={"xatol": 1e-6},
    )
    nu = float(result.x)
    at_boundary = nu - bounds[0] < BOUNDARY_TOLERANCE or bounds[1] - nu < BOUNDARY_TOLERANCE
    if at_boundary:
        logger.warning(f"Degrees of freedom at the search boundary (nu = {nu:.3f}).")

    return NuFit(nu=nu, loglik=-float(result.fun), at_boundary=at_boundary)


def standardized_residuals(kernel: FeedbackKernel, returns: Sequence[float]) -> np.ndarray:
    """
    ``xi_t = r_t / sigma_t`` for ``t >= q``.
    """
    r = as_float_array(returns, "returns", EstimationError)
    s = sigma2_path(kernel, r)
    if np.any(s <= 0):
        raise EstimationError("Nonpositive volatility along the path.")

    return r[kernel.q :] / np.sqrt(s)


def residual_diagnostics(
    residuals: Sequence[float], max_lag: int = 20, threshold: Optional[float] = None
) -> ResidualDiagnostics:
    """
    ``<(xi_t^2 - m)(xi_{t-tau}^2 - m)>`` per lag, ``m`` the mean squared
    residual, with naive standard errors.
    """
    x = as_float_array(residuals, "residuals", EstimationError)
    if x.shape[0] <= max_lag:
        raise EstimationError(f"Need more than {max_lag} residuals.")

    threshold = FLAG_SIGMAS if threshold is None else threshold
    centered = x * x - np.mean(x * x)
    lags = np.arange(1, max_lag + 1)
    values = np.empty(max_lag)
    se = np.empty(max_lag)
    for i, lag in enumerate(lags):
        products = centered[lag:] * centered[:-lag]
        values[i] = np.mean(products)
        se[i] = np.std(products) / np.sqrt(products.shape[0])

    flagged = np.abs(values) > threshold * se
    if flagged.any():
        logger.info(f"Residual variance correlations flagged at lags {lags[flagged].tolist()}.")

    return ResidualDiagnostics(lags=lags, values=values, se=se, flagged=flagged)
