"""
Synthetic QARCH paths, the intraday Rogers-Satchell surrogate and the
aftershock relaxation experiment.
"""

import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ape_qarch._utils import (
    Provenance,
    ResidualLaw,
    loglog_slope,
    make_rng,
    read_table,
    spawn_seeds,
    write_table,
)
from ape_qarch.exceptions import FitError, SimulationError
from ape_qarch.kernel import FeedbackKernel
from ape_qarch.moments import ResidualSpec

NEGATIVE_FLOOR = 1e-12
OVERFLOW_LIMIT = 1e100
AFTERSHOCK_WINDOW = 50
AFTERSHOCK_FIT = (2, 50)


class NegativeSigma2Policy(str, Enum):
    CLAMP = "clamp"
    REJECT = "reject"

    def __str__(self) -> str:
        return self.value


class OmegaSpec(BaseModel):
    """
    Mean-zero AR(1) baseline noise ``omega_t = phi omega_{t-1} + eta_t`` with
    stationary variance ``variance``.
    """

    model_config = ConfigDict(frozen=True)

    variance: float = Field(ge=0)
    ar_coefficient: float = Field(ge=0, lt=1)

    def correlation(self, max_lag: int) -> np.ndarray:
        """
        ``C_omega(tau)`` for ``tau = 0..max_lag``.
        """
        return self.variance * self.ar_coefficient ** np.arange(max_lag + 1)


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kernel: FeedbackKernel
    residual: ResidualSpec = Field(default_factory=ResidualSpec.gaussian)
    T: int = Field(gt=0)
    burn_in: Optional[int] = None
    """Warm-up days discarded; defaults to ``max(10 q, 1000)``."""

    seed: Optional[int] = None
    omega: Optional[OmegaSpec] = None
    negative_sigma2_policy: NegativeSigma2Policy = NegativeSigma2Policy.CLAMP
    allow_unstable: bool = False
    forced_residuals: dict[int, float] = Field(default_factory=dict)
    """Residuals imposed at given dates of the emitted path (exogenous shocks)."""

    @model_validator(mode="after")
    def validate_burn_in(self):
        if self.burn_in is not None and self.burn_in < self.kernel.q:
            raise SimulationError(
                f"Burn-in ({self.burn_in}) must cover the horizon q={self.kernel.q}."
            )

        for date in self.forced_residuals:
            if not 0 <= date < self.T:
                raise SimulationError(f"Forced residual date {date} outside the path.")

        return self

    @property
    def effective_burn_in(self) -> int:
        if self.burn_in is not None:
            return self.burn_in

        return max(10 * self.kernel.q, 1000)


class PathBundle(BaseModel):
    """
    Returns ``r_t = sqrt(sigma2_t) xi_t`` with their true volatility and residuals.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    returns: np.ndarray
    sigma2: np.ndarray
    residuals: np.ndarray
    rs_vol: Optional[np.ndarray] = None
    n_clamped: int = 0
    seed: Optional[int] = None

    @model_validator(mode="after")
    def validate_lengths(self):
        n = self.returns.shape[0]
        for name in ("sigma2", "residuals", "rs_vol"):
            if (value := getattr(self, name)) is not None and value.shape[0] != n:
                raise SimulationError(f"'{name}' has length {value.shape[0]}, expected {n}.")

        if not np.all(np.isfinite(self.returns)):
            raise SimulationError("Non-finite returns in simulated path.")

        return self

    @property
    def T(self) -> int:
        return self.returns.shape[0]

    def reversed(self) -> "PathBundle":
        rs_vol = None if self.rs_vol is None else self.rs_vol[::-1].copy()
        return PathBundle(
            returns=self.returns[::-1].copy(),
            sigma2=self.sigma2[::-1].copy(),
            residuals=self.residuals[::-1].copy(),
            rs_vol=rs_vol,
            n_clamped=self.n_clamped,
            seed=self.seed,
        )


class AftershockReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta: float
    jump_threshold: Optional[float]
    lags: np.ndarray
    profile: np.ndarray
    """Mean ``sigma2_{t+tau}`` after each event over the mean ``sigma2_t`` at the events."""

    n_events: int
    flat: bool = False
    fit_residual: float = 0.0


def draw_residuals(residual: ResidualSpec, size, rng: np.random.Generator) -> np.ndarray:
    """
    Unit-variance draws of the residual law.
    """
    if residual.law == ResidualLaw.STUDENT:
        nu = residual.nu or math.inf
        return rng.standard_t(nu, size=size) * math.sqrt((nu - 2) / nu)

    return rng.standard_normal(size)


def _omega_path(omega: Optional[OmegaSpec], size: int, rng: np.random.Generator) -> np.ndarray:
    if omega is None or omega.variance == 0:
        return np.zeros(size)

    phi = omega.ar_coefficient
    shocks = rng.standard_normal(size) * math.sqrt(omega.variance * (1 - phi**2))
    path = np.empty(size)
    previous = rng.standard_normal() * math.sqrt(omega.variance)
    for t in range(size):
        previous = phi * previous + shocks[t]
        path[t] = previous

    return path


def _run(config: SimConfig, xi: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """
    Core feedback loop over pre-drawn residuals (burn-in included).
    """
    kernel = config.kernel
    if kernel.trace >= 1 and not config.allow_unstable:
        raise SimulationError(
            f"Kernel is non-stationary (trace K = {kernel.trace:.6f}); "
            "set allow_unstable to simulate it anyway."
        )

    q = kernel.q
    total = xi.shape[0]
    omega = _omega_path(config.omega, total, rng)
    # Forward-ordered windows r[t-q:t] use the flipped kernel.
    leverage = kernel.L[::-1]
    diagonal = kernel.diagonal[::-1]
    matrix = kernel.K[::-1, ::-1]
    use_diagonal = kernel.is_diagonal
    floor = NEGATIVE_FLOOR * max(kernel.s2, NEGATIVE_FLOOR)

    buffer = np.zeros(total + q)
    sigma2 = np.empty(total)
    n_clamped = 0
    for t in range(total):
        window = buffer[t : t + q]
        if use_diagonal:
            value = kernel.s2 + leverage @ window + diagonal @ (window * window)
        else:
            value = kernel.s2 + leverage @ window + window @ matrix @ window

        value += omega[t]
        if not math.isfinite(value) or value > OVERFLOW_LIMIT:
            raise SimulationError(f"Volatility overflow at step {t} (sigma2={value}).")

        elif value < 0:
            if config.negative_sigma2_policy == NegativeSigma2Policy.REJECT:
                raise SimulationError(f"Negative sigma2={value:.6g} at step {t}.")

            value = floor
            n_clamped += 1

        sigma2[t] = value
        buffer[t + q] = math.sqrt(value) * xi[t]

    return buffer[q:], sigma2, n_clamped


def _residuals_with_forcing(config: SimConfig, xi: np.ndarray) -> np.ndarray:
    burn = config.effective_burn_in
    for date, value in config.forced_residuals.items():
        xi[burn + date] = value

    return xi


def simulate_qarch(config: SimConfig) -> PathBundle:
    """
    Generate a path of ``config.T`` days after discarding the burn-in.
    """
    rng = make_rng(config.seed)
    burn = config.effective_burn_in
    total = burn + config.T
    xi = _residuals_with_forcing(config, draw_residuals(config.residual, total, rng))
    logger.info(
        f"Simulating QARCH path: q={config.kernel.q}, T={config.T}, burn-in={burn}, "
        f"residual={config.residual}."
    )
    returns, sigma2, n_clamped = _run(config, xi, rng)
    if n_clamped:
        logger.warning(f"Clamped {n_clamped} negative sigma2 values to the floor.")

    return PathBundle(
        returns=returns[burn:],
        sigma2=sigma2[burn:],
        residuals=xi[burn:],
        n_clamped=n_clamped,
        seed=config.seed,
    )


def rogers_satchell_log(high: np.ndarray, low: np.ndarray, close: np.ndarray) -> np.ndarray:
    """
    Rogers-Satchell variance from log prices relative to the open.
    """
    return high * (high - close) + low * (low - close)


def _unit_intraday(
    law: ResidualSpec, days: int, bins: int, rng: np.random.Generator, chunk: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """
    Daily residual and Rogers-Satchell value of ``bins`` unit-variance
    increments scaled by ``1 / sqrt(bins)``.
    """
    xi = np.empty(days)
    rs = np.empty(days)
    scale = 1.0 / math.sqrt(bins)
    for start in range(0, days, chunk):
        stop = min(start + chunk, days)
        increments = draw_residuals(law, (stop - start, bins), rng) * scale
        path = np.cumsum(increments, axis=1)
        close = path[:, -1]
        high = np.maximum(path.max(axis=1), 0.0)
        low = np.minimum(path.min(axis=1), 0.0)
        xi[start:stop] = close
        rs[start:stop] = rogers_satchell_log(high, low, close)

    return xi, rs


def simulate_intraday_rs(
    config: SimConfig, bins: int = 100, intraday: Optional[ResidualSpec] = None
) -> PathBundle:
    """
    Simulate ``bins`` intraday increments per day with the daily ``sigma2_t``
    spread evenly, and measure the day with the Rogers-Satchell estimator.

    Args:
        config (SimConfig): Daily model; ``config.residual`` is ignored.
        bins (int): Intraday increments per day.
        intraday (Optional[ResidualSpec]): Law of each increment, Gaussian by default.

    Returns:
        :class:`PathBundle` with ``rs_vol`` set.
    """
    if bins < 4:
        raise SimulationError(f"Intraday simulation needs at least 4 bins, got {bins}.")

    intraday = intraday or ResidualSpec.gaussian()
    rng = make_rng(config.seed)
    burn = config.effective_burn_in
    total = burn + config.T
    xi, unit_rs = _unit_intraday(intraday, total, bins, rng)
    xi = _residuals_with_forcing(config, xi)
    logger.info(
        f"Simulating intraday surrogate: q={config.kernel.q}, T={config.T}, bins={bins}, "
        f"increments={intraday}."
    )
    returns, sigma2, n_clamped = _run(config, xi, rng)
    if n_clamped:
        logger.warning(f"Clamped {n_clamped} negative sigma2 values to the floor.")

    return PathBundle(
        returns=returns[burn:],
        sigma2=sigma2[burn:],
        residuals=xi[burn:],
        rs_vol=(sigma2 * unit_rs)[burn:],
        n_clamped=n_clamped,
        seed=config.seed,
    )


def simulate_panel(
    config: SimConfig,
    n_series: int,
    threads: int = 1,
    bins: Optional[int] = None,
    intraday: Optional[ResidualSpec] = None,
) -> list[PathBundle]:
    """
    Independent paths with per-series seeds derived from ``config.seed``,
    returned in series order. Setting ``bins`` runs the intraday surrogate.
    """
    seeds = spawn_seeds(config.seed, n_series)
    configs = [config.model_copy(update={"seed": seed}) for seed in seeds]

    def run(series_config: SimConfig) -> PathBundle:
        if bins is None:
            return simulate_qarch(series_config)

        return simulate_intraday_rs(series_config, bins=bins, intraday=intraday)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(run, configs))


def _trailing_rms(returns: np.ndarray, window: int) -> np.ndarray:
    """
    RMS of the ``window`` returns strictly before each date (NaN until filled).
    """
    squares = np.concatenate(([0.0], np.cumsum(returns**2)))
    out = np.full(returns.shape[0], np.nan)
    out[window:] = np.sqrt((squares[window:-1] - squares[:-window - 1]) / window)
    return out


def aftershock_profile(
    bundle: PathBundle,
    threshold_sigmas: Optional[float] = None,
    events: Optional[Sequence[int]] = None,
    max_lag: int = AFTERSHOCK_FIT[1],
    fit_range: tuple[int, int] = AFTERSHOCK_FIT,
    window: int = AFTERSHOCK_WINDOW,
) -> AftershockReport:
    """
    Average relaxation of the volatility after large moves.

    Events are the dates where ``|r_t|`` exceeds ``threshold_sigmas`` times the
    trailing RMS return, or the explicit ``events`` dates. The exponent
    ``theta`` is minus the log-log slope of the raw mean ``sigma2_{t+tau}``,
    normalized by the mean ``sigma2_t`` at the events. No baseline is subtracted.
    """
    returns = bundle.returns
    sigma2 = bundle.sigma2
    T = returns.shape[0]
    if events is None:
        if threshold_sigmas is None:
            raise FitError("Provide either a jump threshold or explicit event dates.")

        local = _trailing_rms(returns, window)
        candidates = np.flatnonzero(np.abs(returns) > threshold_sigmas * local)
    else:
        candidates = np.asarray(events, dtype=int)

    candidates = candidates[(candidates >= 0) & (candidates + max_lag < T)]
    if candidates.size == 0:
        raise FitError(f"No aftershock events at threshold {threshold_sigmas}.")

    lags = np.arange(1, max_lag + 1)
    at_event = max(float(np.mean(sigma2[candidates])), 1e-300)
    profile = np.array([np.mean(sigma2[candidates + lag]) for lag in lags]) / at_event
    report = {
        "jump_threshold": threshold_sigmas,
        "lags": lags,
        "profile": profile,
        "n_events": int(candidates.size),
    }
    if np.ptp(profile) <= 1e-9 * float(np.mean(profile)):
        return AftershockReport(theta=0.0, flat=True, **report)

    low, high = fit_range
    selected = (lags >= low) & (lags <= high) & (profile > 0)
    if selected.sum() < 3:
        raise FitError("Too few positive profile points to fit the relaxation exponent.")

    slope, residual = loglog_slope(lags[selected], profile[selected])
    return AftershockReport(theta=-slope, fit_residual=residual, **report)


def aftershock_curve(bundle: PathBundle, thresholds: Sequence[float], **kwargs) -> pd.DataFrame:
    """
    ``theta`` as a function of the jump threshold; thresholds without events are skipped.
    """
    rows = []
    for threshold in thresholds:
        try:
            report = aftershock_profile(bundle, threshold_sigmas=threshold, **kwargs)
        except FitError as err:
            logger.warning(f"Aftershock threshold {threshold}: {err}")
            continue

        rows.append({"threshold": threshold, "theta": report.theta, "n_events": report.n_events})

    return pd.DataFrame(rows, columns=["threshold", "theta", "n_events"])


def write_path(
    bundle: PathBundle, path: Union[str, Path], provenance: Optional[Provenance] = None
) -> Path:
    rs_vol = bundle.rs_vol if bundle.rs_vol is not None else np.full(bundle.T, np.nan)
    columns: Mapping[str, Sequence] = {
        "t": np.arange(bundle.T),
        "r": bundle.returns,
        "sigma2": bundle.sigma2,
        "xi": bundle.residuals,
        "rs_vol": rs_vol,
    }
    return write_table(path, columns, provenance)


def read_path(path: Union[str, Path]) -> PathBundle:
    """
    Load a path written by :func:`write_path`. An all-empty ``rs_vol`` column reads as ``None``.
    """
    path = Path(path)
    if not path.is_file():
        raise SimulationError(f"Path file '{path}' not found.")

    frame = read_table(path)
    if missing := [c for c in ("r", "sigma2", "xi") if c not in frame.columns]:
        raise SimulationError(f"Path file '{path}' lacks columns {', '.join(missing)}.")

    rs_vol = None
    if "rs_vol" in frame.columns and frame["rs_vol"].notna().all():
        rs_vol = frame["rs_vol"].to_numpy(dtype=float)

    return PathBundle(
        returns=frame["r"].to_numpy(dtype=float),
        sigma2=frame["sigma2"].to_numpy(dtype=float),
        residuals=frame["xi"].to_numpy(dtype=float),
        rs_vol=rs_vol,
    )
