"""
Empirical correlation functions of returns and measured volatility, their
fitted functional forms and the time-reversal asymmetry statistics.

Signed two-point functions are stored on the grid ``tau = -max_lag..max_lag``
(array index ``tau + max_lag``); three- and four-point grids ``D(x, y)`` cover
``x, y = 0..max_lag_d``.
"""

from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

import numpy as np
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import least_squares

from ape_qarch._utils import (
    DEFAULT_R_CUT,
    Provenance,
    as_float_array,
    loglog_slope,
    make_rng,
    write_grid,
    write_table,
)
from ape_qarch.exceptions import CorrelationError, FitError

DEFAULT_MAX_LAG_D = 20
BOOTSTRAP_RESAMPLES = 200
BOOTSTRAP_BLOCK = 50
FIT_RESTARTS = 5
POOR_FIT_RESIDUAL = 0.05

SIGNED_FIELDS = ("c1", "c2", "ca", "lev", "lev_a", "c2_tilde", "ca_tilde", "lev_tilde")
GRID_FIELDS = ("d", "d_a", "d_tilde")


class CorrelationSet(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    max_lag: int = Field(ge=0)
    max_lag_d: int = Field(ge=0)
    mean_r2: float
    mean_abs: Optional[float] = None
    mean_vol2: Optional[float] = None

    c1: np.ndarray
    """Linear correlation ``<r_t r_{t-tau}>``."""

    c2: np.ndarray
    """``<(r_t^2 - <r^2>) r_{t-tau}^2>``, symmetric in ``tau``."""

    lev: np.ndarray
    """Leverage correlation ``<(r_t^2 - <r^2>) r_{t-tau}>``."""

    lev_a: np.ndarray
    """``<|r_t| r_{t-tau}>``."""

    d: np.ndarray
    """``D(x, y) = <(r_t^2 - <r^2>) r_{t-x} r_{t-y}>``."""

    ca: Optional[np.ndarray] = None
    """``<(r_t^2 - <r^2>) |r_{t-tau}|>``."""

    d_a: Optional[np.ndarray] = None
    """``<(|r_t| - <|r|>) r_{t-x} r_{t-y}>``."""

    # Tilde twins replace ``r_t^2`` by the measured volatility; None without a proxy.
    c2_tilde: Optional[np.ndarray] = None
    ca_tilde: Optional[np.ndarray] = None
    lev_tilde: Optional[np.ndarray] = None
    d_tilde: Optional[np.ndarray] = None

    n_obs: Optional[np.ndarray] = None
    """Number of terms averaged per signed lag."""

    se: dict[str, np.ndarray] = Field(default_factory=dict)
    """Naive standard errors of the signed functions, keyed by field name."""

    @model_validator(mode="after")
    def validate_grids(self):
        signed = 2 * self.max_lag + 1
        grid = (self.max_lag_d + 1, self.max_lag_d + 1)
        for name in SIGNED_FIELDS:
            if (value := getattr(self, name)) is not None and value.shape != (signed,):
                raise CorrelationError(
                    f"'{name}' must have shape ({signed},), got {value.shape}."
                )

        for name in GRID_FIELDS:
            if (value := getattr(self, name)) is not None and value.shape != grid:
                raise CorrelationError(f"'{name}' must have shape {grid}, got {value.shape}.")

        return self

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.max_lag, self.max_lag + 1)

    @property
    def has_tilde(self) -> bool:
        return self.c2_tilde is not None

    def at(self, name: str, tau) -> np.ndarray:
        """
        Values of a signed function at (possibly negative) lags.
        """
        values = getattr(self, name)
        if values is None:
            raise CorrelationError(f"Correlation '{name}' was not computed.")

        tau = np.asarray(tau)
        if np.any(np.abs(tau) > self.max_lag):
            raise CorrelationError(
                f"Lag {int(np.max(np.abs(tau)))} beyond max_lag={self.max_lag} for '{name}'."
            )

        return values[tau + self.max_lag]

    def grid(self, name: str, x, y) -> np.ndarray:
        values = getattr(self, name)
        if values is None:
            raise CorrelationError(f"Correlation grid '{name}' was not computed.")

        x, y = np.asarray(x), np.asarray(y)
        if np.any(x < 0) or np.any(y < 0) or np.any(x > self.max_lag_d) or np.any(
            y > self.max_lag_d
        ):
            raise CorrelationError(f"Grid '{name}' covers lags 0..{self.max_lag_d} only.")

        return values[x, y]

    def positive(self, name: str) -> np.ndarray:
        """
        Values at ``tau = 1..max_lag``.
        """
        return self.at(name, np.arange(1, self.max_lag + 1))


class TRIReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    delta: np.ndarray
    """Integrated asymmetry at ``tau = 0..max_tau``; ``delta[0] == 0``."""

    leverage_part: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None

    @property
    def max_tau(self) -> int:
        return self.delta.shape[0] - 1

    @property
    def asymmetry(self) -> np.ndarray:
        return np.diff(self.delta)


class FitParams(BaseModel):
    residual: float
    """RMS residual of the fit."""

    converged: bool = True


class LeverageFit(FitParams):
    """
    ``-a exp(-tau / b) - c exp(-tau / d)``, with ``b >= d``.
    """

    a: float
    b: float
    c: float
    d: float

    def evaluate(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        return -self.a * np.exp(-tau / self.b) - self.c * np.exp(-tau / self.d)


class AmplitudeFit(FitParams):
    """
    ``B tau^-beta exp(-tau / tau0)``.
    """

    B: float
    beta: float
    tau0: float

    def evaluate(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        return self.B * tau ** (-self.beta) * np.exp(-tau / self.tau0)


class LinearFit(FitParams):
    """
    ``-A exp(-lam tau)`` for the small linear anti-correlations.
    """

    A: float
    lam: float

    def evaluate(self, tau) -> np.ndarray:
        return -self.A * np.exp(-self.lam * np.asarray(tau, dtype=float))


class ExponentFit(BaseModel):
    beta: float
    residual: float
    poor_fit: bool


def _lagged(x: np.ndarray, y: np.ndarray, tau: int) -> np.ndarray:
    """
    Products ``x_t y_{t-tau}`` over every valid ``t``.
    """
    T = x.shape[0]
    if tau >= 0:
        return x[tau:] * y[: T - tau]

    return x[: T + tau] * y[-tau:]


def _three_point(x: np.ndarray, r: np.ndarray, lag_x: int, lag_y: int) -> float:
    """
    ``<x_t r_{t-lag_x} r_{t-lag_y}>`` over every ``t >= max(lag_x, lag_y)``.
    """
    start = max(lag_x, lag_y)
    T = x.shape[0]
    pair = r[start - lag_x : T - lag_x] * r[start - lag_y : T - lag_y]
    return float(np.mean(x[start:] * pair))


def _signed(x: np.ndarray, y: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    values = np.empty(2 * max_lag + 1)
    errors = np.empty(2 * max_lag + 1)
    for i, tau in enumerate(range(-max_lag, max_lag + 1)):
        products = _lagged(x, y, tau)
        values[i] = np.mean(products)
        errors[i] = np.std(products) / np.sqrt(products.shape[0])

    return values, errors


def _symmetric_c2(x: np.ndarray, r: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """
    ``C2`` from the same estimator as the diagonal of ``D``, mirrored to negative lags.
    """
    half = np.empty(max_lag + 1)
    errors = np.empty(max_lag + 1)
    T = x.shape[0]
    for tau in range(max_lag + 1):
        half[tau] = _three_point(x, r, tau, tau)
        products = x[tau:] * (r[: T - tau] * r[: T - tau])
        errors[tau] = np.std(products) / np.sqrt(products.shape[0])

    return np.concatenate((half[:0:-1], half)), np.concatenate((errors[:0:-1], errors))


def _grid(x: np.ndarray, r: np.ndarray, n: int) -> np.ndarray:
    grid = np.empty((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(i, n + 1):
            grid[i, j] = grid[j, i] = _three_point(x, r, i, j)

    return grid


def compute_correlations(
    returns: Sequence[float],
    vol2: Optional[Sequence[float]] = None,
    max_lag: int = 50,
    max_lag_d: Optional[int] = None,
) -> CorrelationSet:
    """
    Estimate every two-, three- and four-point function of a single series.

    Args:
        returns (Sequence[float]): Centered, standardized returns.
        vol2 (Optional[Sequence[float]]): Measured squared volatility; enables the
          tilde functions.
        max_lag (int): Largest lag of the two-point functions.
        max_lag_d (Optional[int]): Largest lag of the ``D`` grids, defaulting to
          ``min(max_lag, 20)``.

    Returns:
        :class:`CorrelationSet`
    """
    r = as_float_array(returns, "returns", CorrelationError)
    T = r.shape[0]
    if max_lag < 0:
        raise CorrelationError("max_lag must be non-negative.")

    elif T < 2 * max_lag or T < 2:
        raise CorrelationError(f"Series of length {T} is too short for max_lag={max_lag}.")

    n_d = min(max_lag, DEFAULT_MAX_LAG_D) if max_lag_d is None else max_lag_d
    if n_d > max_lag:
        raise CorrelationError(f"max_lag_d={n_d} exceeds max_lag={max_lag}.")

    squares = r * r
    absolute = np.abs(r)
    mean_r2 = float(np.mean(squares))
    mean_abs = float(np.mean(absolute))
    centered = squares - mean_r2
    se: dict[str, np.ndarray] = {}
    values: dict = {}

    values["c1"], se["c1"] = _signed(r, r, max_lag)
    values["c2"], se["c2"] = _symmetric_c2(centered, r, max_lag)
    values["ca"], se["ca"] = _signed(centered, absolute, max_lag)
    values["lev"], se["lev"] = _signed(centered, r, max_lag)
    values["lev_a"], se["lev_a"] = _signed(absolute, r, max_lag)
    values["d"] = _grid(centered, r, n_d)
    values["d_a"] = _grid(absolute - mean_abs, r, n_d)

    mean_vol2 = None
    if vol2 is not None:
        v = as_float_array(vol2, "vol2", CorrelationError)
        if v.shape[0] != T:
            raise CorrelationError(f"vol2 has length {v.shape[0]}, returns have length {T}.")

        mean_vol2 = float(np.mean(v))
        centered_vol = v - mean_vol2
        values["c2_tilde"], se["c2_tilde"] = _signed(centered_vol, squares, max_lag)
        values["ca_tilde"], se["ca_tilde"] = _signed(centered_vol, absolute, max_lag)
        values["lev_tilde"], se["lev_tilde"] = _signed(centered_vol, r, max_lag)
        values["d_tilde"] = _grid(centered_vol, r, n_d)

    logger.debug(f"Correlations computed: T={T}, max_lag={max_lag}, max_lag_d={n_d}.")
    return CorrelationSet(
        max_lag=max_lag,
        max_lag_d=n_d,
        mean_r2=mean_r2,
        mean_abs=mean_abs,
        mean_vol2=mean_vol2,
        n_obs=T - np.abs(np.arange(-max_lag, max_lag + 1)),
        se=se,
        **values,
    )


def compute_panel_correlations(
    returns: Sequence[Sequence[float]],
    vol2: Optional[Sequence[Sequence[float]]] = None,
    max_lag: int = 50,
    max_lag_d: Optional[int] = None,
    threads: int = 1,
) -> CorrelationSet:
    """
    Per-series correlations pooled with equal weights, in series order.
    """
    if vol2 is not None and len(vol2) != len(returns):
        raise CorrelationError("Returns and vol2 panels have different series counts.")

    proxies = list(vol2) if vol2 is not None else [None] * len(returns)

    def run(index: int) -> CorrelationSet:
        return compute_correlations(returns[index], proxies[index], max_lag, max_lag_d)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sets = list(pool.map(run, range(len(returns))))

    return pool_correlations(sets)


def pool_correlations(sets: Sequence[CorrelationSet]) -> CorrelationSet:
    """
    Equal-weight average of per-series correlation sets on identical grids.
    """
    if not sets:
        raise CorrelationError("Nothing to pool.")

    first = sets[0]
    if any(s.max_lag != first.max_lag or s.max_lag_d != first.max_lag_d for s in sets):
        raise CorrelationError("Cannot pool correlation sets with different lag grids.")

    def average(name: str) -> Optional[np.ndarray]:
        items = [getattr(s, name) for s in sets]
        if any(item is None for item in items):
            return None

        return np.mean(np.stack(items), axis=0)

    def scalar(name: str) -> Optional[float]:
        items = [getattr(s, name) for s in sets]
        return None if any(item is None for item in items) else float(np.mean(items))

    n = len(sets)
    se = {
        name: np.sqrt(sum(s.se[name] ** 2 for s in sets)) / n
        for name in first.se
        if all(name in s.se for s in sets)
    }
    n_obs = None
    if all(s.n_obs is not None for s in sets):
        n_obs = np.sum(np.stack([s.n_obs for s in sets]), axis=0)

    return CorrelationSet(
        max_lag=first.max_lag,
        max_lag_d=first.max_lag_d,
        mean_r2=float(np.mean([s.mean_r2 for s in sets])),
        mean_abs=scalar("mean_abs"),
        mean_vol2=scalar("mean_vol2"),
        n_obs=n_obs,
        se=se,
        **{name: average(name) for name in (*SIGNED_FIELDS, *GRID_FIELDS)},
    )


def truncate_returns(returns: Sequence[float], r_cut: float = DEFAULT_R_CUT) -> np.ndarray:
    """
    Cap large events smoothly: ``r_cut * tanh(r / r_cut)``.
    """
    if r_cut <= 0:
        raise CorrelationError(f"r_cut must be positive, got {r_cut}.")

    return r_cut * np.tanh(np.asarray(returns, dtype=float) / r_cut)


def _asymmetry_contributions(
    returns: np.ndarray, vol2: np.ndarray, max_tau: int
) -> Iterator[np.ndarray]:
    """
    Per-date summands whose time average is the integrated asymmetry at
    ``tau = 1..max_tau`` in turn, edges padded with zeros.
    """
    T = returns.shape[0]
    squares = returns * returns
    centered = vol2 - np.mean(vol2)
    backward = np.zeros(T)
    forward = np.zeros(T)
    for tau in range(1, max_tau + 1):
        backward[tau:] += squares[: T - tau]
        forward[: T - tau] += squares[tau:]
        yield centered * (backward - forward)


def _bootstrap_se(
    returns: np.ndarray,
    vol2: np.ndarray,
    max_tau: int,
    n_boot: int,
    block: int,
    seed: Optional[int],
) -> np.ndarray:
    """
    Circular block bootstrap of the integrated asymmetry.
    """
    T = returns.shape[0]
    n_blocks = max(1, -(-T // block))
    rng = make_rng(seed)
    starts = rng.integers(0, T, size=(n_boot, n_blocks))
    contributions = _asymmetry_contributions(returns, vol2, max_tau)
    se = np.zeros(max_tau + 1)
    for i, summand in enumerate(contributions, start=1):
        wrapped = np.concatenate((summand, summand[: block - 1]))
        prefix = np.concatenate(([0.0], np.cumsum(wrapped)))
        block_sums = prefix[starts + block] - prefix[starts]
        replicates = block_sums.sum(axis=1) / (n_blocks * block)
        se[i] = np.std(replicates, ddof=1) if n_boot > 1 else 0.0

    return se


def tri_delta(
    correlations: CorrelationSet,
    returns: Optional[Sequence[float]] = None,
    vol2: Optional[Sequence[float]] = None,
    leverage: Optional[Sequence[float]] = None,
    max_tau: Optional[int] = None,
    n_boot: int = BOOTSTRAP_RESAMPLES,
    block: int = BOOTSTRAP_BLOCK,
    seed: Optional[int] = None,
) -> TRIReport:
    """
    Integrated time-reversal asymmetry
    ``Delta(tau) = sum_{tau'=1..tau} [C2_tilde(tau') - C2_tilde(-tau')]``.

    Standard errors need the underlying ``returns`` and ``vol2``; the leverage
    part needs the leverage kernel ``L``.
    """
    if correlations.c2_tilde is None:
        raise CorrelationError("Time-reversal statistics need the tilde correlations.")

    max_tau = correlations.max_lag if max_tau is None else max_tau
    if max_tau > correlations.max_lag:
        raise CorrelationError(f"max_tau={max_tau} exceeds max_lag={correlations.max_lag}.")

    taus = np.arange(1, max_tau + 1)
    asymmetry = correlations.at("c2_tilde", taus) - correlations.at("c2_tilde", -taus)
    delta = np.concatenate(([0.0], np.cumsum(asymmetry)))

    se = None
    if returns is not None and vol2 is not None:
        r = as_float_array(returns, "returns", CorrelationError)
        v = as_float_array(vol2, "vol2", CorrelationError, length=r.shape[0])
        se = _bootstrap_se(r, v, max_tau, n_boot, block, seed)

    leverage_part = None
    if leverage is not None:
        leverage_part = leverage_tri_contribution(leverage, correlations.lev, max_tau)

    return TRIReport(delta=delta, leverage_part=leverage_part, se=se)


def leverage_tri_contribution(
    L: Sequence[float], lev: Sequence[float], max_tau: Optional[int] = None
) -> np.ndarray:
    """
    Lowest-order leverage share of ``Delta``:
    ``sum_{tau'=1..tau} L(tau') [Lev(tau' - tau) - Lev(tau' + tau)]``.

    Args:
        L (Sequence[float]): Leverage kernel at lags ``1..q``.
        lev (Sequence[float]): Signed leverage correlation on ``-M..M``.
        max_tau (Optional[int]): Largest ``tau``; defaults to ``min(q, M // 2)``.

    Returns:
        ``np.ndarray``: Values at ``tau = 0..max_tau``.
    """
    L = np.asarray(L, dtype=float)
    lev = np.asarray(lev, dtype=float)
    if lev.ndim != 1 or lev.shape[0] % 2 == 0:
        raise CorrelationError("Leverage correlation must be a signed grid of odd length.")

    half = lev.shape[0] // 2
    max_tau = min(L.shape[0], half // 2) if max_tau is None else max_tau
    if max_tau > L.shape[0] or 2 * max_tau > half:
        raise CorrelationError(
            f"max_tau={max_tau} needs L up to {max_tau} and Lev up to {2 * max_tau}; "
            f"got q={L.shape[0]}, M={half}."
        )

    out = np.zeros(max_tau + 1)
    for tau in range(1, max_tau + 1):
        lags = np.arange(1, tau + 1)
        difference = lev[half + lags - tau] - lev[half + lags + tau]
        out[tau] = float(L[:tau] @ difference)

    return out


def _best_fit(residuals, starts: list[np.ndarray], bounds, max_nfev: int):
    best = None
    for start in starts:
        try:
            result = least_squares(residuals, start, bounds=bounds, max_nfev=max_nfev)
        except ValueError as err:
            logger.debug(f"Fit restart failed: {err}")
            continue

        if best is None or result.cost < best.cost:
            best = result

    if best is None or best.status <= 0:
        raise FitError("Nonlinear fit did not converge.")

    return best


def _positive_lags(values: Sequence[float], name: str) -> tuple[np.ndarray, np.ndarray]:
    y = as_float_array(values, name, FitError)
    if y.shape[0] < 3:
        raise FitError(f"Need at least 3 lags to fit '{name}'.")

    return np.arange(1, y.shape[0] + 1, dtype=float), y


def fit_leverage(
    lev: Sequence[float], seed: int = 0, restarts: int = FIT_RESTARTS, max_nfev: int = 2000
) -> LeverageFit:
    """
    Two-exponential fit of the leverage correlation on ``tau = 1..len(lev)``.
    """
    tau, y = _positive_lags(lev, "lev")
    if not np.any(y):
        return LeverageFit(a=0.0, b=1.0, c=0.0, d=1.0, residual=0.0)

    horizon = tau[-1]
    scale = float(np.max(np.abs(y)))

    def residuals(p):
        a, b, c, d = p
        return -a * np.exp(-tau / b) - c * np.exp(-tau / d) - y

    rng = make_rng(seed)
    starts = [np.array([scale / 4, horizon / 2, scale, max(horizon / 20, 1.0)])]
    for _ in range(restarts):
        starts.append(
            np.array(
                [
                    rng.uniform(0, scale),
                    np.exp(rng.uniform(0, np.log(10 * horizon))),
                    rng.uniform(0, scale),
                    np.exp(rng.uniform(0, np.log(10 * horizon))),
                ]
            )
        )

    bounds = ([0, 1e-3, 0, 1e-3], [np.inf, 1e3 * horizon, np.inf, 1e3 * horizon])
    best = _best_fit(residuals, starts, bounds, max_nfev)
    a, b, c, d = best.x
    if b < d:
        a, b, c, d = c, d, a, b

    residual = float(np.sqrt(np.mean(best.fun**2)))
    return LeverageFit(a=a, b=b, c=c, d=d, residual=residual)


def fit_ca(
    ca: Sequence[float], seed: int = 0, restarts: int = FIT_RESTARTS, max_nfev: int = 2000
) -> AmplitudeFit:
    """
    Truncated power-law fit ``B tau^-beta exp(-tau / tau0)`` on ``tau = 1..len(ca)``.
    """
    tau, y = _positive_lags(ca, "ca")
    horizon = tau[-1]
    scale = float(np.max(np.abs(y))) or 1.0

    def residuals(p):
        B, beta, tau0 = p
        return B * tau ** (-beta) * np.exp(-tau / tau0) - y

    rng = make_rng(seed)
    starts = [np.array([max(y[0], scale / 2), 0.2, horizon])]
    for _ in range(restarts):
        starts.append(
            np.array(
                [
                    rng.uniform(0, 2 * scale),
                    rng.uniform(0, 1.5),
                    np.exp(rng.uniform(0, np.log(100 * horizon))),
                ]
            )
        )

    bounds = ([0, -2, 1e-3], [np.inf, 5, 1e6 * horizon])
    best = _best_fit(residuals, starts, bounds, max_nfev)
    B, beta, tau0 = best.x
    residual = float(np.sqrt(np.mean(best.fun**2)))
    return AmplitudeFit(B=B, beta=beta, tau0=tau0, residual=residual)


def fit_linear(c1: Sequence[float], max_nfev: int = 2000) -> LinearFit:
    """
    ``-A exp(-lam tau)`` fit of the linear correlation on ``tau = 1..len(c1)``.
    """
    tau, y = _positive_lags(c1, "c1")

    def residuals(p):
        A, lam = p
        return -A * np.exp(-lam * tau) - y

    start = np.array([-y[0] if y[0] else 1e-3, 0.5])
    best = _best_fit(residuals, [start], ([-np.inf, 1e-6], [np.inf, 50]), max_nfev)
    A, lam = best.x
    return LinearFit(A=A, lam=lam, residual=float(np.sqrt(np.mean(best.fun**2))))


def measure_c2_exponent(
    c2: Sequence[float],
    window: tuple[int, int],
    poor_fit_threshold: float = POOR_FIT_RESIDUAL,
) -> ExponentFit:
    """
    Log-log slope of ``C2(tau) ~ B tau^-beta`` over ``window`` (inclusive lags,
    ``c2[0]`` being lag 1).
    """
    values = np.asarray(c2, dtype=float)
    low, high = window
    if low < 1 or high > values.shape[0] or high - low < 2:
        raise CorrelationError(f"Window {window} outside lags 1..{values.shape[0]}.")

    taus = np.arange(low, high + 1)
    selected = values[low - 1 : high]
    if np.any(selected <= 0):
        raise CorrelationError(f"C2 must be positive over the window {window}.")

    slope, residual = loglog_slope(taus, selected)
    poor = residual > poor_fit_threshold
    if poor:
        logger.warning(f"Power-law fit of C2 is poor (log residual {residual:.3g}).")

    return ExponentFit(beta=-slope, residual=residual, poor_fit=poor)


def write_correlations(
    correlations: CorrelationSet,
    directory: Union[str, Path],
    provenance: Optional[Provenance] = None,
) -> list[Path]:
    """
    One CSV per signed function (``tau, value, se, n_obs``) and one dense grid
    per ``D`` matrix.
    """
    directory = Path(directory)
    written = []
    n_obs = correlations.n_obs
    if n_obs is None:
        n_obs = np.full(2 * correlations.max_lag + 1, np.nan)

    for name in SIGNED_FIELDS:
        if (values := getattr(correlations, name)) is None:
            continue

        se = correlations.se.get(name, np.full(values.shape, np.nan))
        columns = {"tau": correlations.lags, "value": values, "se": se, "n_obs": n_obs}
        written.append(write_table(directory / f"{name}.csv", columns, provenance))

    for name in GRID_FIELDS:
        if (values := getattr(correlations, name)) is not None:
            written.append(write_grid(directory / f"{name}.csv", values, provenance))

    return written
