import numpy as np
import pandas as pd
import pytest

from ape_qarch._utils import SplitMode
from ape_qarch.data import (
    Panel,
    align,
    build_panel,
    load_ohlc_csv,
    load_panel,
    log_returns,
    make_splits,
    market_volatility,
    read_manifest,
    rogers_satchell,
    standardize,
    with_market_volatility,
    write_panel_summary,
    write_splits,
)
from ape_qarch.exceptions import DataError

HEADER = "date,open,high,low,close\n"


@pytest.fixture
def ohlc_file(tmp_path):
    def write(body: str, name: str = "stock.csv"):
        path = tmp_path / name
        path.write_text(HEADER + body, encoding="utf8")
        return path

    return write


def test_load_ohlc(ohlc_writer, tmp_path, rng):
    path = ohlc_writer(tmp_path / "abc.csv", rng.normal(0, 0.01, 20))
    series = load_ohlc_csv(path)
    assert series.name == "abc"
    assert len(series) == 21
    assert np.all(series.low <= np.minimum(series.open, series.close))


def test_unsorted_rows_are_sorted(ohlc_file):
    path = ohlc_file(
        "2001-01-03,10,11,9,10.5\n2001-01-02,10,11,9,10\n2001-01-04,10.5,12,10,11\n"
    )
    series = load_ohlc_csv(path)
    assert series.dates.is_monotonic_increasing
    np.testing.assert_allclose(series.close, [10, 10.5, 11])


@pytest.mark.parametrize(
    "body,message,row",
    [
        ("2001-01-02,10,11,9,10\n2001-01-03,10,11,-9,10\n", "Nonpositive 'low'", 2),
        ("2001-01-02,10,11,9,10\n2001-01-03,10,10.2,9,10.5\n", "ordering violated", 2),
        ("2001-01-02,10,11,9,10\n2001-01-02,10,11,9,10\n", "Duplicate date", 2),
        ("2001-01-02,10,11,9,abc\n", "Unparsable 'close'", 1),
        ("not-a-date,10,11,9,10\n", "Unparsable date", 1),
    ],
)
def test_malformed_rows(ohlc_file, body, message, row):
    with pytest.raises(DataError, match=message) as err:
        load_ohlc_csv(ohlc_file(body))

    assert err.value.row == row
    assert err.value.path.endswith("stock.csv")


def test_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("date,open,close\n2001-01-02,1,1\n", encoding="utf8")
    with pytest.raises(DataError, match="Missing columns: high, low"):
        load_ohlc_csv(path)


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError, match="Cannot read"):
        load_ohlc_csv(tmp_path / "nope.csv")


def test_rogers_satchell(ohlc_file):
    series = load_ohlc_csv(ohlc_file("2001-01-02,100,110,95,105\n2001-01-03,100,100,100,100\n"))
    expected = np.log(110 / 100) * np.log(110 / 105) + np.log(95 / 100) * np.log(95 / 105)
    np.testing.assert_allclose(rogers_satchell(series), [expected, 0.0])
    assert np.all(rogers_satchell(series) >= 0)
    np.testing.assert_allclose(log_returns(series), [np.log(100 / 105)])


def test_read_manifest(manifest, tmp_path):
    paths = read_manifest(manifest)
    assert len(paths) == 4
    assert paths[0] == tmp_path / "stocks" / "stock_0.csv"


def test_empty_manifest(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("# nothing\n\n", encoding="utf8")
    with pytest.raises(DataError, match="lists no series"):
        read_manifest(path)

    with pytest.raises(DataError, match="not found"):
        read_manifest(tmp_path / "missing.txt")


def test_align_drops_sparse_series(ohlc_writer, tmp_path, rng):
    full = load_ohlc_csv(ohlc_writer(tmp_path / "full.csv", rng.normal(0, 0.01, 99)))
    gappy = full.loc(full.dates[::2]).model_copy(update={"name": "gappy"})
    almost = full.loc(full.dates.delete(10)).model_copy(update={"name": "almost"})
    aligned, dropped = align([full, gappy, almost])
    assert dropped == ("gappy",)
    assert [item.name for item in aligned] == ["full", "almost"]
    assert len(aligned[0]) == 99


def test_align_everything_dropped(ohlc_writer, tmp_path, rng):
    a = load_ohlc_csv(ohlc_writer(tmp_path / "a.csv", rng.normal(0, 0.01, 9)))
    b = load_ohlc_csv(ohlc_writer(tmp_path / "b.csv", rng.normal(0, 0.01, 9), start="2010-01-04"))
    with pytest.raises(DataError, match="Every series"):
        align([a, b])


def test_load_panel(manifest, simulated_returns):
    panel = load_panel(manifest, threads=2)
    assert panel.n_series == 4
    assert panel.n_dates == 600
    np.testing.assert_allclose(panel.returns[0], simulated_returns[0], atol=1e-8)
    assert np.all(panel.vol2 >= 0)


def test_build_panel_needs_dates(ohlc_file):
    series = load_ohlc_csv(ohlc_file("2001-01-02,10,11,9,10\n2001-01-03,10,11,9,10\n"))
    with pytest.raises(DataError, match="Fewer than 3"):
        build_panel([series])


def test_market_volatility_leave_one_out():
    returns = np.array([[1.0, 2.0], [3.0, 0.0], [0.0, 2.0]])
    sigma = market_volatility(returns)
    np.testing.assert_allclose(sigma[0], np.sqrt([9 / 2, 4 / 2]))
    np.testing.assert_allclose(sigma[1], np.sqrt([1 / 2, 8 / 2]))

    with pytest.raises(DataError, match="at least 2 series"):
        market_volatility(returns[:1])


def test_standardize(rng):
    panel = Panel.from_arrays(rng.normal(0.1, 3.0, (3, 500)), rng.uniform(1, 4, (3, 500)))
    out = standardize(panel)
    np.testing.assert_allclose(out.returns.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.returns.std(axis=1), 1.0)
    np.testing.assert_allclose(out.vol2.mean(axis=1), 1.0)
    assert out.standardized
    assert not out.market_adjusted


def test_standardize_divides_market_once(rng):
    panel = with_market_volatility(Panel.from_arrays(rng.normal(size=(3, 200))))
    once = standardize(panel)
    assert once.market_adjusted
    twice = standardize(once)
    np.testing.assert_allclose(twice.returns, once.returns, atol=1e-12)


def test_standardize_zero_variance():
    panel = Panel.from_arrays([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]], names=["flat", "ok"])
    with pytest.raises(DataError, match="flat"):
        standardize(panel)


def test_panel_shape_validation():
    with pytest.raises(DataError, match="must have shape"):
        Panel.from_arrays(np.ones((2, 5)), np.ones((2, 4)))


def test_random_half_splits():
    splits = make_splits(7, 100, SplitMode.RANDOM_HALVES, 5, seed=1)
    assert len(splits) == 5
    for split in splits:
        assert len(split.calibration_series) == 3
        assert set(split.calibration_series) | set(split.test_series) == set(range(7))
        assert not set(split.calibration_series) & set(split.test_series)

    again = make_splits(7, 100, "random-halves", 5, seed=1)
    assert splits == again


def test_block_date_splits():
    for split in make_splits(3, 101, SplitMode.BLOCK_DATES, 10, seed=2, q=10):
        [(start, stop)] = split.calibration_dates
        assert stop - start == 50
        covered = sum(b - a for a, b in split.test_dates)
        assert covered == 51


def test_split_errors():
    with pytest.raises(DataError, match="at least 2 series"):
        make_splits(1, 100, SplitMode.RANDOM_HALVES, 1)

    with pytest.raises(DataError, match="at least 20 dates"):
        make_splits(3, 15, SplitMode.BLOCK_DATES, 1, q=10)


def test_split_select(rng):
    pool = [rng.normal(size=100) for _ in range(3)]
    split = make_splits(3, 100, SplitMode.BLOCK_DATES, 1, seed=4)[0]
    calibration = split.select(pool, "calibration")
    assert len(calibration) == 3
    assert all(len(segment) == 50 for segment in calibration)
    with pytest.raises(DataError, match="Unknown split role"):
        split.select(pool, "validation")


def test_write_splits_and_summary(tmp_path, rng):
    splits = make_splits(4, 50, SplitMode.RANDOM_HALVES, 2, seed=0)
    path = write_splits(splits, tmp_path / "splits.csv", names=["a", "b", "c", "d"])
    frame = pd.read_csv(path)
    assert len(frame) == 8
    assert set(frame["series"]) == {"a", "b", "c", "d"}

    panel = Panel.from_arrays(rng.normal(size=(2, 30)))
    summary = pd.read_csv(write_panel_summary(panel, tmp_path / "panel.csv"))
    assert list(summary.columns) == ["series", "mean_r", "var_r", "mean_vol2"]
