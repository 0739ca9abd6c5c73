import json
import math
from collections.abc import Iterable, Mapping, Sequence
from enum import Enum
from importlib import metadata
from pathlib import Path
from typing import IO, Any, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from ape_qarch.exceptions import QarchError

FLOAT_FORMAT = "%.17g"
"""Round-trip exact decimal format for every numeric output."""

INFINITE_HORIZON = math.inf
DEFAULT_R_CUT = 3.0
DEFAULT_NU = 6.4
MAX_SUPPORTED_Q = 512
PACKAGE_NAME = "ape-qarch"
ESTIMATOR_NAMES = ("arch", "gmm", "ml", "ml-zero")
"""Built-in estimators; restricted families are named ``family:<Tag>``."""


class SplitMode(str, Enum):
    RANDOM_HALVES = "random-halves"
    BLOCK_DATES = "block-dates"

    def __str__(self) -> str:
        return self.value


class ResidualLaw(str, Enum):
    GAUSSIAN = "gaussian"
    STUDENT = "student"

    def __str__(self) -> str:
        return self.value


def format_float(value: float) -> str:
    return FLOAT_FORMAT % value


def get_package_version() -> str:
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return "0.0.0+unknown"


def as_float_array(
    values: Any,
    name: str,
    error_cls: type[QarchError] = QarchError,
    length: Optional[int] = None,
    ndim: int = 1,
) -> np.ndarray:
    """
    Convert ``values`` to a finite float array, raising ``error_cls`` otherwise.

    Args:
        values (Any): Array-like input.
        name (str): Name used in error messages.
        error_cls (type[QarchError]): The error type to raise.
        length (Optional[int]): Required length along every axis, if any.
        ndim (int): Required number of dimensions.

    Returns:
        ``np.ndarray``: A new float64 array.
    """
    try:
        array = np.array(values, dtype=float)
    except (TypeError, ValueError) as err:
        raise error_cls(f"'{name}' is not numeric: {err}") from err

    if array.ndim != ndim:
        raise error_cls(f"'{name}' must have {ndim} dimension(s), got shape {array.shape}.")

    elif length is not None and any(n != length for n in array.shape):
        raise error_cls(f"'{name}' must have length {length}, got shape {array.shape}.")

    elif not np.all(np.isfinite(array)):
        raise error_cls(f"'{name}' contains non-finite values.")

    return array


def frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def lag_matrix(returns: np.ndarray, q: int) -> np.ndarray:
    """
    Windows of past returns, most recent first: row ``i`` holds
    ``returns[q + i - 1], returns[q + i - 2], ..., returns[i]``, i.e. the
    window seen at date ``t = q + i``.
    """
    windows = np.lib.stride_tricks.sliding_window_view(returns[:-1], q)
    return windows[:, ::-1]


def iter_chunks(n: int, size: int = 65536) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def make_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)


def spawn_seeds(seed: Optional[int], count: int) -> list[int]:
    """
    Derive ``count`` independent child seeds from a master seed.
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """
    Least-squares slope of ``log y`` on ``log x``.

    Returns:
        tuple[float, float]: The slope and the RMS residual in log space.
    """
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    residual = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    return float(slope), residual


class Provenance(BaseModel):
    """
    Header block written at the top of every output file.
    """

    model_config = ConfigDict(frozen=True)

    command: str
    config: dict = Field(default_factory=dict)
    seed: Optional[int] = None
    version: str = Field(default_factory=get_package_version)

    def lines(self) -> list[str]:
        config_str = json.dumps(self.config, sort_keys=True, default=str)
        return [
            f"# command: {self.command}",
            f"# config: {config_str}",
            f"# seed: {self.seed}",
            f"# version: {self.version}",
        ]

    def write(self, fout: IO[str]):
        for line in self.lines():
            fout.write(f"{line}\n")


def write_table(
    path: Union[str, Path],
    columns: Union[Mapping[str, Sequence], pd.DataFrame],
    provenance: Optional[Provenance] = None,
) -> Path:
    """
    Write a CSV table, preceded by the provenance header when given.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = columns if isinstance(columns, pd.DataFrame) else pd.DataFrame(dict(columns))
    with path.open("w", encoding="utf8", newline="") as fout:
        if provenance is not None:
            provenance.write(fout)

        frame.to_csv(fout, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    return path


def write_grid(
    path: Union[str, Path], grid: np.ndarray, provenance: Optional[Provenance] = None
) -> Path:
    """
    Write a dense matrix as a header-less CSV grid.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf8") as fout:
        if provenance is not None:
            provenance.write(fout)

        for row in np.atleast_2d(grid):
            fout.write(",".join(format_float(v) for v in row))
            fout.write("\n")

    return path


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
