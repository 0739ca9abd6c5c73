import pandas as pd
import pytest

from ape_qarch._cli import cli
from ape_qarch.exceptions import EstimationError
from ape_qarch.kernel import read_kernel, write_kernel
from ape_qarch.simulate import SimConfig, read_path, simulate_intraday_rs, write_path


@pytest.fixture
def output_dir(tmp_path):
    return tmp_path / "out"


def invoke(cli_runner, *arguments):
    return cli_runner.invoke(cli, [str(a) for a in arguments], catch_exceptions=False)


def header(path) -> list[str]:
    return [line for line in path.read_text(encoding="utf8").splitlines() if line.startswith("#")]


def test_simulate(cli_runner, output_dir):
    result = invoke(
        cli_runner,
        "simulate",
        *("--k", 0.3, "--k", 0.15, "--s2", 0.55),
        *("--length", 500, "--seed", 3, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    bundle = read_path(output_dir / "path.csv")
    assert bundle.T == 500
    assert bundle.rs_vol is None
    assert read_kernel(output_dir / "kernel.csv").q == 2

    lines = header(output_dir / "summary.csv")
    assert lines[0] == "# command: simulate"
    assert lines[2] == "# seed: 3"
    manifest = (output_dir / "manifest.txt").read_text(encoding="utf8")
    assert "written: path.csv" in manifest
    assert "missing:" not in manifest


def test_simulate_is_reproducible(cli_runner, tmp_path):
    for name in ("a", "b"):
        arguments = ("--k", 0.2, "--length", 200, "--seed", 9, "--output-dir", tmp_path / name)
        assert invoke(cli_runner, "simulate", *arguments).exit_code == 0

    first = pd.read_csv(tmp_path / "a" / "path.csv", comment="#")
    second = pd.read_csv(tmp_path / "b" / "path.csv", comment="#")
    pd.testing.assert_frame_equal(first, second)


def test_simulate_intraday_panel(cli_runner, output_dir):
    result = invoke(
        cli_runner,
        "simulate",
        *("--k", 0.2, "--length", 100, "--n-series", 3, "--intraday", "--bins", 10),
        *("--seed", 4, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    paths = sorted((output_dir / "paths").glob("series_*.csv"))
    assert len(paths) == 3
    assert read_path(paths[0]).rs_vol is not None
    assert len(pd.read_csv(output_dir / "summary.csv", comment="#")) == 3


def test_simulate_rejects_unstable_kernel(cli_runner, output_dir):
    result = cli_runner.invoke(
        cli,
        ["simulate", "--k", "0.7", "--k", "0.5", "--length", "50", "--output-dir", str(output_dir)],
    )
    assert result.exit_code != 0
    manifest = (output_dir / "manifest.txt").read_text(encoding="utf8")
    assert "missing: path.csv" in manifest


def test_simulate_bad_config_value(cli_runner, output_dir):
    result = cli_runner.invoke(
        cli, ["simulate", "--bins", "2", "--length", "10", "--output-dir", str(output_dir)]
    )
    assert result.exit_code != 0
    assert "at least 4 bins" in result.output


def test_config_file(cli_runner, tmp_path, output_dir):
    config = tmp_path / "run.yaml"
    config.write_text(
        f"qarch:\n  seed: 5\n  output_dir: {output_dir}\n  simulate:\n"
        "    k: [0.1]\n    length: 50\n",
        encoding="utf8",
    )
    result = invoke(cli_runner, "simulate", "--config", config)
    assert result.exit_code == 0, result.output
    assert read_path(output_dir / "path.csv").T == 50
    assert header(output_dir / "path.csv")[2] == "# seed: 5"


def test_splits(cli_runner, output_dir):
    result = invoke(
        cli_runner,
        "splits",
        *("--n-series", 6, "--n-dates", 100, "--n-samplings", 3),
        *("--seed", 1, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(output_dir / "splits.csv", comment="#")
    assert set(frame["sampling"]) == {0, 1, 2}
    assert set(frame["role"]) == {"calibration", "test"}


def test_splits_from_manifest(cli_runner, manifest, output_dir):
    result = invoke(
        cli_runner,
        "splits",
        *("--manifest", manifest, "--split-mode", "block-dates", "--q", 5),
        *("--n-samplings", 2, "--seed", 1, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(output_dir / "splits.csv", comment="#")
    assert set(frame["series"]) == {f"stock_{i}" for i in range(4)}


def test_splits_need_shape(cli_runner, output_dir):
    result = cli_runner.invoke(cli, ["splits", "--output-dir", str(output_dir)])
    assert result.exit_code != 0
    assert "missing: splits.csv" in (output_dir / "manifest.txt").read_text(encoding="utf8")


def test_calibrate(cli_runner, manifest, output_dir):
    result = invoke(
        cli_runner,
        "calibrate",
        *("--manifest", manifest, "--q-diag", 3, "--q-off", 2, "--max-lag", 10),
        *("--estimators", "arch", "--estimators", "gmm", "--families", "TwoScale"),
        *("--n-samplings", 2, "--seed", 2, "--threads", 1, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    for name in (
        "panel.csv",
        "correlations/c2.csv",
        "correlation_fits.csv",
        "kernel_gmm.csv",
        "kernel.csv",
        "ml_params.csv",
        "profile.csv",
        "families/TwoScale.csv",
        "likelihood.csv",
    ):
        assert (output_dir / name).is_file(), name

    kernel = read_kernel(output_dir / "kernel.csv")
    assert kernel.q == 3
    likelihood = pd.read_csv(output_dir / "likelihood.csv", comment="#")
    assert list(likelihood["estimator"]) == ["arch", "gmm"]


def test_calibrate_without_manifest(cli_runner, output_dir):
    result = cli_runner.invoke(
        cli, ["calibrate", "--q-diag", "3", "--q-off", "1", "--output-dir", str(output_dir)]
    )
    assert result.exit_code != 0
    manifest = (output_dir / "manifest.txt").read_text(encoding="utf8")
    assert "missing: panel.csv" in manifest
    assert "missing: kernel.csv" in manifest


def test_analyze(cli_runner, tmp_path, output_dir, arch_kernel):
    kernel_file = write_kernel(arch_kernel, tmp_path / "kernel.csv")
    bundle = simulate_intraday_rs(SimConfig(kernel=arch_kernel, T=3000, seed=8), bins=20)
    path_file = write_path(bundle, tmp_path / "path.csv")
    result = invoke(
        cli_runner,
        "analyze",
        *("--kernel-file", kernel_file, "--path-file", path_file),
        *("--alphas", 1.5, "--alphas", 2.0, "--frontier-q", 4, "--frontier-q", 16),
        *("--max-tau", 5, "--n-boot", 10, "--thresholds", 2.0),
        *("--seed", 1, "--output-dir", output_dir),
    )
    assert result.exit_code == 0, result.output
    moments = pd.read_csv(output_dir / "moments.csv", comment="#").iloc[0]
    assert moments["sigma2_mean"] == pytest.approx(1.0)
    assert bool(moments["stable4"])
    tri = pd.read_csv(output_dir / "tri.csv", comment="#")
    assert list(tri.columns) == ["tau", "delta", "se"]
    assert len(tri) == 6
    assert len(pd.read_csv(output_dir / "frontier.csv", comment="#")) == 4
    assert (output_dir / "spectrum.csv").is_file()
    assert (output_dir / "aftershock.csv").is_file()


def test_analyze_missing_kernel_file(cli_runner, tmp_path, output_dir):
    result = cli_runner.invoke(
        cli,
        [
            "analyze",
            *("--kernel-file", str(tmp_path / "nope.csv")),
            *("--alphas", "1.5", "--frontier-q", "4"),
            *("--output-dir", str(output_dir)),
        ],
    )
    assert result.exit_code != 0
    manifest = (output_dir / "manifest.txt").read_text(encoding="utf8")
    assert "missing: moments.csv" in manifest
    assert "written: frontier.csv" in manifest


def test_failed_stage_keeps_other_artifacts(cli_runner, manifest, output_dir, mocker):
    mocker.patch(
        "ape_qarch._cli.is_oos_harness", side_effect=EstimationError("Split too small.")
    )
    result = cli_runner.invoke(
        cli,
        [
            "calibrate",
            *("--manifest", str(manifest), "--q-diag", "3", "--q-off", "1"),
            *("--max-lag", "10", "--families", "TwoScale", "--estimators", "arch"),
            *("--seed", "2", "--output-dir", str(output_dir)),
        ],
    )
    assert result.exit_code != 0
    manifest_lines = (output_dir / "manifest.txt").read_text(encoding="utf8").splitlines()
    assert "missing: likelihood.csv" in manifest_lines
    assert "written: kernel.csv" in manifest_lines
