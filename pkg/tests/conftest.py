from pathlib import Path

import ape
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from ape_qarch.kernel import build_arch, build_two_scale
from ape_qarch.simulate import SimConfig, simulate_panel

SEED = 20140101


@pytest.fixture(scope="session", autouse=True)
def config():
    with ape.config.isolate_data_folder():
        yield ape.config


# Needed for integration testing
pytest_plugins = ["pytester"]


@pytest.fixture
def cli_runner():
    return CliRunner()


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def arch1_kernel():
    return build_arch([0.5], s2=0.5)


@pytest.fixture
def arch_kernel():
    return build_arch([0.3, 0.15, 0.08, 0.04, 0.02], s2=0.41)


@pytest.fixture
def two_scale_kernel():
    return build_two_scale([0.2, 0.1, 0.05], [0.04, 0.02], s2=0.53)


def write_ohlc(path: Path, returns: np.ndarray, seed: int = 0, start: str = "2001-01-02") -> Path:
    """
    Write a synthetic ``date,open,high,low,close`` file whose closes follow ``returns``.
    """
    rng = np.random.default_rng(seed)
    close = 100 * np.exp(np.concatenate(([0.0], np.cumsum(returns))))
    open_ = np.concatenate(([close[0]], close[:-1])) * np.exp(rng.normal(0, 1e-3, close.size))
    upper = np.maximum(open_, close) * np.exp(np.abs(rng.normal(0, 5e-3, close.size)))
    lower = np.minimum(open_, close) * np.exp(-np.abs(rng.normal(0, 5e-3, close.size)))
    frame = pd.DataFrame(
        {
            "date": pd.bdate_range(start, periods=close.size).strftime("%Y-%m-%d"),
            "open": open_,
            "high": upper,
            "low": lower,
            "close": close,
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10f")
    return path


@pytest.fixture
def ohlc_writer():
    return write_ohlc


@pytest.fixture
def simulated_returns(arch_kernel):
    bundles = simulate_panel(SimConfig(kernel=arch_kernel, T=600, seed=SEED), n_series=4)
    return [0.01 * bundle.returns for bundle in bundles]


@pytest.fixture
def manifest(tmp_path, simulated_returns):
    """
    Four aligned OHLC files and the manifest listing them.
    """
    lines = []
    for index, returns in enumerate(simulated_returns):
        path = write_ohlc(tmp_path / "stocks" / f"stock_{index}.csv", returns, seed=index)
        lines.append(str(path.relative_to(tmp_path)))

    path = tmp_path / "stocks.txt"
    path.write_text("# test panel\n" + "\n".join(lines) + "\n", encoding="utf8")
    return path
