"""
OHLC ingestion, Rogers-Satchell volatility, market-volatility removal,
standardization and the sampling splits of the evaluation harness.
"""

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from ape.logging import logger
from pydantic import BaseModel, ConfigDict, model_validator

from ape_qarch._utils import Provenance, SplitMode, make_rng, write_table
from ape_qarch.exceptions import DataError

OHLC_COLUMNS = ("date", "open", "high", "low", "close")
MAX_MISSING_FRACTION = 0.02


class OhlcSeries(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = ""
    dates: pd.DatetimeIndex
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray

    @model_validator(mode="after")
    def validate_prices(self):
        n = len(self.dates)
        for field in ("open", "high", "low", "close"):
            if getattr(self, field).shape != (n,):
                raise DataError(f"'{field}' must have {n} values.", path=self.name or None)

        prices = np.stack([self.open, self.high, self.low, self.close])
        if (bad := np.flatnonzero(~np.all(prices > 0, axis=0))).size:
            raise DataError("Nonpositive price.", row=int(bad[0]) + 1, path=self.name or None)

        lower = np.minimum(self.open, self.close)
        upper = np.maximum(self.open, self.close)
        violations = np.flatnonzero((self.low > lower) | (upper > self.high))
        if violations.size:
            raise DataError(
                "OHLC ordering violated (need low <= open, close <= high).",
                row=int(violations[0]) + 1,
                path=self.name or None,
            )

        elif not self.dates.is_monotonic_increasing or self.dates.has_duplicates:
            raise DataError("Dates must be strictly increasing.", path=self.name or None)

        return self

    def __len__(self) -> int:
        return len(self.dates)

    def loc(self, dates: pd.DatetimeIndex) -> "OhlcSeries":
        positions = self.dates.get_indexer(dates)
        if np.any(positions < 0):
            raise DataError("Requested dates missing from the series.", path=self.name or None)

        return OhlcSeries(
            name=self.name,
            dates=dates,
            open=self.open[positions],
            high=self.high[positions],
            low=self.low[positions],
            close=self.close[positions],
        )


class Panel(BaseModel):
    """
    Aligned return and measured-volatility series, one row per series.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    names: tuple[str, ...]
    dates: pd.DatetimeIndex
    returns: np.ndarray
    vol2: np.ndarray
    market_vol: Optional[np.ndarray] = None
    """Leave-one-out cross-sectional volatility per series and date."""

    market_adjusted: bool = False
    standardized: bool = False
    dropped: tuple[str, ...] = ()

    @model_validator(mode="after")
    def validate_shapes(self):
        shape = (len(self.names), len(self.dates))
        for field in ("returns", "vol2", "market_vol"):
            if (value := getattr(self, field)) is not None and value.shape != shape:
                raise DataError(f"'{field}' must have shape {shape}, got {value.shape}.")

        return self

    @property
    def n_series(self) -> int:
        return len(self.names)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    def pool(self) -> list[np.ndarray]:
        return [row.copy() for row in self.returns]

    @classmethod
    def from_arrays(
        cls,
        returns: Sequence[Sequence[float]],
        vol2: Optional[Sequence[Sequence[float]]] = None,
        names: Optional[Sequence[str]] = None,
    ) -> "Panel":
        returns_arr = np.atleast_2d(np.asarray(returns, dtype=float))
        vol2_arr = returns_arr**2 if vol2 is None else np.atleast_2d(np.asarray(vol2, float))
        n, T = returns_arr.shape
        names = tuple(names) if names is not None else tuple(f"series_{i}" for i in range(n))
        return cls(
            names=names,
            dates=pd.bdate_range("2000-01-03", periods=T),
            returns=returns_arr,
            vol2=vol2_arr,
        )


class Split(BaseModel):
    """
    One sampling: calibration and test series, each over half-open date ranges.
    """

    model_config = ConfigDict(frozen=True)

    index: int
    mode: SplitMode
    calibration_series: tuple[int, ...]
    test_series: tuple[int, ...]
    calibration_dates: tuple[tuple[int, int], ...]
    test_dates: tuple[tuple[int, int], ...]

    def select(self, pool: Sequence[np.ndarray], role: str, min_length: int = 2) -> list:
        """
        Return segments of ``pool`` for ``role`` (``calibration`` or ``test``).
        """
        if role == "calibration":
            series, ranges = self.calibration_series, self.calibration_dates
        elif role == "test":
            series, ranges = self.test_series, self.test_dates
        else:
            raise DataError(f"Unknown split role '{role}'.")

        return [
            np.asarray(pool[i][start:stop])
            for i in series
            for start, stop in ranges
            if stop - start >= min_length
        ]


def _row_error(mask: pd.Series, message: str, path: str):
    if mask.any():
        # Data rows count from 1 after the header.
        raise DataError(message, row=int(np.flatnonzero(mask.to_numpy())[0]) + 1, path=path)


def load_ohlc_csv(path: Union[str, Path], name: Optional[str] = None) -> OhlcSeries:
    """
    Parse a ``date,open,high,low,close`` file, sorting out-of-order rows.

    Raises:
        :class:`~ape_qarch.exceptions.DataError`: On missing columns, unparsable
          values, nonpositive prices, OHLC ordering violations or duplicate dates.
    """
    path = Path(path)
    label = str(path)
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise DataError(f"Cannot read OHLC file: {err}", path=label) from err

    frame.columns = [c.strip().lower() for c in frame.columns]
    if missing := [c for c in OHLC_COLUMNS if c not in frame.columns]:
        raise DataError(f"Missing columns: {', '.join(missing)}.", path=label)

    dates = pd.to_datetime(frame["date"], errors="coerce")
    _row_error(dates.isna(), "Unparsable date.", label)
    prices = {c: pd.to_numeric(frame[c], errors="coerce") for c in OHLC_COLUMNS[1:]}
    for column, values in prices.items():
        _row_error(values.isna(), f"Unparsable '{column}' value.", label)
        _row_error(values <= 0, f"Nonpositive '{column}' price.", label)

    _row_error(
        (prices["low"] > np.minimum(prices["open"], prices["close"]))
        | (np.maximum(prices["open"], prices["close"]) > prices["high"]),
        "OHLC ordering violated (need low <= open, close <= high).",
        label,
    )
    _row_error(dates.duplicated(), "Duplicate date.", label)

    order = np.argsort(dates.to_numpy(), kind="stable")
    if n_moved := int(np.sum(order != np.arange(order.size))):
        logger.warning(f"{label}: sorted {n_moved} out-of-order rows.")

    return OhlcSeries(
        name=name or path.stem,
        dates=pd.DatetimeIndex(dates.to_numpy()[order]),
        **{c: prices[c].to_numpy(dtype=float)[order] for c in OHLC_COLUMNS[1:]},
    )


def rogers_satchell(series: OhlcSeries) -> np.ndarray:
    """
    ``ln(H/O) ln(H/C) + ln(L/O) ln(L/C)`` per day.
    """
    high_open = np.log(series.high / series.open)
    high_close = np.log(series.high / series.close)
    low_open = np.log(series.low / series.open)
    low_close = np.log(series.low / series.close)
    return high_open * high_close + low_open * low_close


def log_returns(series: OhlcSeries) -> np.ndarray:
    """
    Close-to-close log returns, dated at the later day.
    """
    return np.diff(np.log(series.close))


def read_manifest(path: Union[str, Path]) -> list[Path]:
    """
    One series file per line, relative to the manifest; ``#`` starts a comment.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError("Manifest not found.", path=str(path))

    entries = []
    for line in path.read_text(encoding="utf8").splitlines():
        if entry := line.split("#", 1)[0].strip():
            candidate = Path(entry).expanduser()
            entries.append(candidate if candidate.is_absolute() else path.parent / candidate)

    if not entries:
        raise DataError("Manifest lists no series.", path=str(path))

    return entries


def align(
    series: Sequence[OhlcSeries], max_missing: float = MAX_MISSING_FRACTION
) -> tuple[list[OhlcSeries], tuple[str, ...]]:
    """
    Drop series missing more than ``max_missing`` of the union of dates, then
    restrict the rest to their common dates.
    """
    if not series:
        raise DataError("No series to align.")

    union = series[0].dates
    for item in series[1:]:
        union = union.union(item.dates)

    kept, dropped = [], []
    for item in series:
        missing = 1 - len(item) / len(union)
        if missing > max_missing:
            logger.warning(f"Dropping '{item.name}': {missing:.1%} of dates missing.")
            dropped.append(item.name)
        else:
            kept.append(item)

    if not kept:
        raise DataError("Every series was dropped during alignment.")

    common = kept[0].dates
    for item in kept[1:]:
        common = common.intersection(item.dates)

    return [item.loc(common) for item in kept], tuple(dropped)


def build_panel(series: Sequence[OhlcSeries], max_missing: float = MAX_MISSING_FRACTION) -> Panel:
    aligned, dropped = align(series, max_missing)
    if len(aligned[0]) < 3:
        raise DataError("Fewer than 3 common dates after alignment.")

    return Panel(
        names=tuple(item.name for item in aligned),
        dates=aligned[0].dates[1:],
        returns=np.stack([log_returns(item) for item in aligned]),
        vol2=np.stack([rogers_satchell(item)[1:] for item in aligned]),
        dropped=dropped,
    )


def load_panel(
    manifest: Union[str, Path], max_missing: float = MAX_MISSING_FRACTION, threads: int = 1
) -> Panel:
    paths = read_manifest(manifest)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        series = list(pool.map(load_ohlc_csv, paths))

    panel = build_panel(series, max_missing)
    logger.info(
        f"Loaded panel: {panel.n_series} series x {panel.n_dates} dates "
        f"({len(panel.dropped)} dropped)."
    )
    return panel


def market_volatility(returns: Sequence[Sequence[float]]) -> np.ndarray:
    """
    Leave-one-out cross-sectional volatility
    ``Sigma_{i,t} = sqrt(sum_{j != i} r_{j,t}^2 / (N - 1))``.
    """
    r = np.atleast_2d(np.asarray(returns, dtype=float))
    n = r.shape[0]
    if n < 2:
        raise DataError(f"Market volatility needs at least 2 series, got {n}.")

    squares = r * r
    return np.sqrt((squares.sum(axis=0)[None, :] - squares) / (n - 1))


def with_market_volatility(panel: Panel) -> Panel:
    return panel.model_copy(update={"market_vol": market_volatility(panel.returns)})


def standardize(panel: Panel) -> Panel:
    """
    Divide by the market volatility (once, when computed), then center and
    scale each return series and scale each volatility series to mean one.
    """
    returns = panel.returns
    vol2 = panel.vol2
    if panel.market_vol is not None and not panel.market_adjusted:
        if np.any(panel.market_vol <= 0):
            raise DataError("Market volatility vanishes on some dates.")

        returns = returns / panel.market_vol
        vol2 = vol2 / panel.market_vol**2

    std = returns.std(axis=1)
    mean_vol2 = vol2.mean(axis=1)
    if bad := [name for name, s, v in zip(panel.names, std, mean_vol2) if s == 0 or v <= 0]:
        raise DataError(f"Zero-variance series: {', '.join(bad)}.")

    return panel.model_copy(
        update={
            "returns": (returns - returns.mean(axis=1, keepdims=True)) / std[:, None],
            "vol2": vol2 / mean_vol2[:, None],
            "market_adjusted": panel.market_adjusted or panel.market_vol is not None,
            "standardized": True,
        }
    )


def make_splits(
    n_series: int,
    n_dates: int,
    mode: SplitMode,
    n_samplings: int,
    seed: Optional[int] = None,
    q: int = 0,
) -> list[Split]:
    """
    Deterministic calibration/test splits.

    ``random-halves`` assigns half of the series (rounded down) to calibration
    over all dates. ``block-dates`` keeps every series and calibrates on one
    contiguous half of the dates at a random start, testing on the rest.
    """
    mode = SplitMode(mode)
    rng = make_rng(seed)
    splits = []
    everything = ((0, n_dates),)
    if mode == SplitMode.RANDOM_HALVES:
        if n_series < 2:
            raise DataError(f"Random halves need at least 2 series, got {n_series}.")

        half = n_series // 2
        for index in range(n_samplings):
            order = rng.permutation(n_series)
            splits.append(
                Split(
                    index=index,
                    mode=mode,
                    calibration_series=tuple(sorted(int(i) for i in order[:half])),
                    test_series=tuple(sorted(int(i) for i in order[half:])),
                    calibration_dates=everything,
                    test_dates=everything,
                )
            )

        return splits

    if n_dates < max(2 * q, 2):
        raise DataError(f"Block-date splits need at least {max(2 * q, 2)} dates, got {n_dates}.")

    width = n_dates // 2
    series = tuple(range(n_series))
    for index in range(n_samplings):
        start = int(rng.integers(0, n_dates - width + 1))
        stop = start + width
        test = tuple((a, b) for a, b in ((0, start), (stop, n_dates)) if b > a)
        splits.append(
            Split(
                index=index,
                mode=mode,
                calibration_series=series,
                test_series=series,
                calibration_dates=((start, stop),),
                test_dates=test,
            )
        )

    return splits


def write_splits(
    splits: Sequence[Split],
    path: Union[str, Path],
    names: Optional[Sequence[str]] = None,
    provenance: Optional[Provenance] = None,
) -> Path:
    rows = []
    for split in splits:
        for role in ("calibration", "test"):
            series = getattr(split, f"{role}_series")
            for start, stop in getattr(split, f"{role}_dates"):
                for i in series:
                    rows.append(
                        {
                            "sampling": split.index,
                            "role": role,
                            "series": names[i] if names is not None else i,
                            "date_start": start,
                            "date_stop": stop,
                        }
                    )

    frame = pd.DataFrame(rows, columns=["sampling", "role", "series", "date_start", "date_stop"])
    return write_table(path, frame, provenance)


def write_panel_summary(
    panel: Panel, path: Union[str, Path], provenance: Optional[Provenance] = None
) -> Path:
    columns = {
        "series": list(panel.names),
        "mean_r": panel.returns.mean(axis=1),
        "var_r": panel.returns.var(axis=1),
        "mean_vol2": panel.vol2.mean(axis=1),
    }
    return write_table(path, columns, provenance)

