from collections.abc import Callable, Iterable
from pathlib import Path
from typing import Any, Optional, TypeVar, Union, get_origin

import click
import numpy as np
import pandas as pd
from ape.api import PluginConfig
from ape.cli.options import ape_cli_context
from ape.logging import logger

from ape_qarch._utils import Provenance, ResidualLaw, write_grid, write_table
from ape_qarch.config import (
    AnalyzeConfig,
    CalibrateConfig,
    QarchConfig,
    SimulateConfig,
    SplitsConfig,
    load_config,
)
from ape_qarch.correlators import (
    DEFAULT_MAX_LAG_D,
    compute_correlations,
    compute_panel_correlations,
    fit_ca,
    fit_leverage,
    fit_linear,
    tri_delta,
    truncate_returns,
    write_correlations,
)
from ape_qarch.data import (
    Panel,
    load_panel,
    make_splits,
    standardize,
    with_market_volatility,
    write_panel_summary,
    write_splits,
)
from ape_qarch.estimate.fits import (
    fit_s2_profile,
    fit_student_nu,
    residual_diagnostics,
    s2_profile,
    standardized_residuals,
)
from ape_qarch.estimate.gmm import GMMProblem, gmm_calibrate, smooth_correlations
from ape_qarch.estimate.harness import EstimatorSettings, is_oos_harness, make_estimator
from ape_qarch.estimate.ml import EstimationResult, ml_calibrate, restricted_ml
from ape_qarch.exceptions import (
    ConfigError,
    FitError,
    MomentError,
    QarchError,
    Stage,
    StageError,
)
from ape_qarch.kernel import (
    FeedbackKernel,
    build_arch,
    family_from_name,
    positivity_check,
    read_kernel,
    write_kernel,
)
from ape_qarch.moments import (
    MomentReport,
    ResidualSpec,
    fourth_moment,
    frontier_scan,
    long_memory_reference,
    omega_tri_correction,
    second_moment,
)
from ape_qarch.simulate import (
    OmegaSpec,
    PathBundle,
    SimConfig,
    aftershock_curve,
    read_path,
    simulate_intraday_rs,
    simulate_panel,
    simulate_qarch,
    write_path,
)
from ape_qarch.spectral import eigendecompose, write_spectrum

T = TypeVar("T")
GLOBAL_KEYS = ("output_dir", "threads", "seed", "nu")


class RunArtifacts:
    """
    Written and missing outputs of one command, plus the provenance header
    they all share.
    """

    def __init__(self, command: str, config: QarchConfig):
        self.command = command
        self.directory = Path(config.output_dir)
        self.provenance = Provenance(
            command=command, config=config.run_config(command), seed=config.seed
        )
        self.written: list[Path] = []
        self.missing: list[str] = []

    def path(self, name: str) -> Path:
        return self.directory / name

    def record(self, paths: Union[Path, Iterable[Path]]):
        self.written.extend([paths] if isinstance(paths, Path) else paths)

    def run(
        self,
        stage: Stage,
        artifacts: Iterable[str],
        func: Callable[[], T],
        requires: Iterable[Any] = (),
    ) -> Optional[T]:
        """
        Run one pipeline stage. A failure, or a missing prerequisite, is
        logged and its artifacts are reported missing.
        """
        artifacts = list(artifacts)
        if any(item is None for item in requires):
            logger.error(f"Stage '{stage}' skipped: an earlier stage failed.")
            self.missing.extend(artifacts)
            return None

        try:
            return func()
        except QarchError as err:
            logger.error(str(StageError(stage, err)))
            self.missing.extend(artifacts)
            return None

    def finish(self, cli_ctx):
        manifest = self.path("manifest.txt")
        manifest.parent.mkdir(parents=True, exist_ok=True)
        lines = self.provenance.lines()
        lines.extend(f"written: {p.relative_to(self.directory)}" for p in self.written)
        lines.extend(f"missing: {name}" for name in self.missing)
        manifest.write_text("\n".join(lines) + "\n", encoding="utf8")
        logger.info(f"{len(self.written)} artifact(s) written to '{self.directory}'.")
        if self.missing:
            cli_ctx.abort(f"Missing artifacts: {', '.join(self.missing)}.")


def _section_option(name: str, annotation: Any):
    flag = name.replace("_", "-")
    if annotation is bool:
        return click.option(f"--{flag}/--no-{flag}", name, default=None)

    elif get_origin(annotation) is list:
        return click.option(f"--{flag}", name, multiple=True, help="Repeat for each value.")

    # NOTE: Values stay strings here; pydantic coerces them when the config is validated.
    return click.option(f"--{flag}", name, default=None)


def config_options(section: type[PluginConfig]):
    """
    A ``--config`` YAML file, the global keys and one flag per section key.
    """

    def decorator(f):
        for name, field in reversed(list(section.model_fields.items())):
            f = _section_option(name, field.annotation)(f)

        f = click.option("--nu", default=None, help="Student degrees of freedom")(f)
        f = click.option("--seed", default=None, help="Master random seed")(f)
        f = click.option("--threads", default=None, help="Worker cap")(f)
        f = click.option(
            "--output-dir",
            "output_dir",
            default=None,
            help="Artifact directory (default: $QARCH_OUTPUT_DIR)",
        )(f)
        f = click.option(
            "--config",
            "config_file",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            help="YAML file holding a 'qarch:' mapping",
        )(f)
        return f

    return decorator


def _resolve(cli_ctx, command: str, config_file: Optional[Path], flags: dict) -> QarchConfig:
    project = cli_ctx.config_manager.get_config("qarch")
    base = project.model_dump(mode="json", exclude_unset=True)
    overrides = {key: flags.pop(key) for key in GLOBAL_KEYS}
    overrides[command] = flags
    try:
        config = load_config(base, config_file, overrides)
    except ConfigError as err:
        cli_ctx.abort(str(err))

    logger.info(f"Running '{command}', writing to '{config.output_dir}'.")
    return config


def _residual(law: ResidualLaw, nu: float) -> ResidualSpec:
    return ResidualSpec.student(nu) if law == ResidualLaw.STUDENT else ResidualSpec.gaussian()


def _load_panel(manifest: Optional[Path], threads: int, market_adjust: bool = False) -> Panel:
    if manifest is None:
        raise ConfigError("A panel manifest is required.")

    panel = load_panel(manifest, threads=threads)
    if market_adjust and panel.n_series > 1:
        panel = with_market_volatility(panel)

    return standardize(panel)


@click.group
def cli():
    """`qarch` command group"""


@cli.command(short_help="Simulate QARCH paths")
@ape_cli_context()
@config_options(SimulateConfig)
def simulate(cli_ctx, config_file, **flags):
    """
    Simulate one or more QARCH paths, optionally measured by the intraday
    Rogers-Satchell surrogate.
    """
    config = _resolve(cli_ctx, "simulate", config_file, flags)
    section = config.simulate
    run = RunArtifacts("simulate", config)

    def kernel() -> FeedbackKernel:
        if section.kernel_file is not None:
            return read_kernel(section.kernel_file)

        elif section.k:
            return build_arch(section.k, section.s2)

        return long_memory_reference(section.reference_q)

    def paths(model: FeedbackKernel) -> list[PathBundle]:
        sim = SimConfig(
            kernel=model,
            residual=_residual(section.residual, config.nu),
            T=section.length,
            burn_in=section.burn_in,
            seed=config.seed,
            negative_sigma2_policy=section.negative_sigma2_policy,
            allow_unstable=section.allow_unstable,
        )
        intraday = _residual(section.intraday_residual, section.intraday_nu)
        if section.n_series > 1:
            bins = section.bins if section.intraday else None
            return simulate_panel(sim, section.n_series, config.threads, bins, intraday)

        elif section.intraday:
            return [simulate_intraday_rs(sim, bins=section.bins, intraday=intraday)]

        return [simulate_qarch(sim)]

    def write(model: FeedbackKernel, bundles: list[PathBundle]):
        run.record(write_kernel(model, run.path("kernel.csv"), run.provenance))
        rows = []
        for index, bundle in enumerate(bundles):
            name = "path.csv" if len(bundles) == 1 else f"paths/series_{index:03d}.csv"
            run.record(write_path(bundle, run.path(name), run.provenance))
            sigma2 = bundle.sigma2
            rows.append(
                {
                    "series": index,
                    "T": bundle.T,
                    "mean_sigma2": float(np.mean(sigma2)),
                    "mean_sigma4": float(np.mean(sigma2**2)),
                    "sigma4_se": float(np.std(sigma2**2) / np.sqrt(bundle.T)),
                    "n_clamped": bundle.n_clamped,
                }
            )

        run.record(write_table(run.path("summary.csv"), pd.DataFrame(rows), run.provenance))

    model = run.run(Stage.SIMULATE, ["kernel.csv"], kernel)
    bundles = run.run(Stage.SIMULATE, ["path.csv"], lambda: paths(model), requires=[model])
    run.run(
        Stage.SIMULATE,
        ["summary.csv"],
        lambda: write(model, bundles),
        requires=[model, bundles],
    )
    run.finish(cli_ctx)


@cli.command(short_help="Calibrate a QARCH kernel on a panel")
@ape_cli_context()
@config_options(CalibrateConfig)
def calibrate(cli_ctx, config_file, **flags):
    """
    Load a panel, estimate its correlation functions and calibrate the
    kernel by GMM then one-step ML. Writes the likelihood comparison of the
    requested estimators, the baseline profile and the family fits.
    """
    config = _resolve(cli_ctx, "calibrate", config_file, flags)
    section = config.calibrate
    run = RunArtifacts("calibrate", config)
    q = section.q_diag
    max_lag = section.max_lag or q
    max_lag_d = section.max_lag_d or max(section.q_off, min(max_lag, DEFAULT_MAX_LAG_D))

    def panel() -> Panel:
        loaded = _load_panel(section.manifest, config.threads, section.market_adjust)
        run.record(write_panel_summary(loaded, run.path("panel.csv"), run.provenance))
        return loaded

    data = run.run(Stage.LOAD, ["panel.csv"], panel)
    pool = data.pool() if data is not None else None

    def correlations():
        cs = compute_panel_correlations(
            pool, list(data.vol2), max_lag, max_lag_d, threads=config.threads
        )
        run.record(write_correlations(cs, run.path("correlations"), run.provenance))
        truncated = None
        if section.q_off > 1:
            truncated = compute_panel_correlations(
                [truncate_returns(r, section.r_cut) for r in pool],
                list(data.vol2),
                max_lag,
                max_lag_d,
                threads=config.threads,
            )
            written = write_correlations(truncated, run.path("correlations/truncated"))
            run.record(written)

        return cs, truncated

    pair = run.run(Stage.CORRELATIONS, ["correlations/"], correlations, requires=[data])

    def gmm():
        cs, truncated = pair
        amplitude_name = "ca_tilde" if cs.ca_tilde is not None else "ca"
        seed = config.seed or 0
        fitted = {}
        for name, fit in (
            ("lev", lambda: fit_leverage(cs.positive("lev"), seed=seed)),
            (amplitude_name, lambda: fit_ca(cs.positive(amplitude_name), seed=seed)),
            ("c1", lambda: fit_linear(cs.positive("c1"))),
        ):
            try:
                fitted[name] = fit()
            except FitError as err:
                logger.warning(f"Fit of '{name}' skipped: {err}")

        rows = [{"function": name, **fit.model_dump()} for name, fit in fitted.items()]
        fits = pd.DataFrame(rows, columns=["function"] if not rows else None)
        run.record(write_table(run.path("correlation_fits.csv"), fits, run.provenance))
        leverage, amplitude = fitted.get("lev"), fitted.get(amplitude_name)
        if section.smooth:
            cs = smooth_correlations(cs, leverage, amplitude)

        problem = GMMProblem(
            correlations=cs,
            truncated=truncated,
            q_diag=q,
            q_off=section.q_off,
            amplitude=section.amplitude,
        )
        result = gmm_calibrate(problem)
        run.record(write_kernel(result.kernel(), run.path("kernel_gmm.csv"), run.provenance))
        return result

    result = run.run(
        Stage.GMM, ["correlation_fits.csv", "kernel_gmm.csv"], gmm, requires=[pair]
    )

    def likelihood() -> EstimationResult:
        cs, _ = pair
        linear = None
        if section.include_c1:
            linear = cs.positive("c1")[:q] / cs.at("c1", 0)

        ml = ml_calibrate(
            result.kernel(),
            pool,
            section.q_off,
            config.nu,
            linear=linear,
            method=section.derivatives,
        )
        run.record(write_kernel(ml.kernel, run.path("kernel.csv"), run.provenance))
        run.record(write_grid(run.path("kernel_heatmap.csv"), ml.kernel.K, run.provenance))
        run.record(_write_params(ml, run.path("ml_params.csv"), run.provenance))
        return ml

    ml = run.run(
        Stage.LIKELIHOOD,
        ["kernel.csv", "kernel_heatmap.csv", "ml_params.csv"],
        likelihood,
        requires=[result],
    )

    def residuals():
        xi = np.concatenate([standardized_residuals(ml.kernel, r) for r in pool])
        nu_fit = fit_student_nu(xi)
        diagnostics = residual_diagnostics(xi)
        frame = pd.DataFrame(
            {
                "lag": diagnostics.lags,
                "value": diagnostics.values,
                "se": diagnostics.se,
                "flagged": diagnostics.flagged,
            }
        )
        run.record(write_table(run.path("residuals.csv"), frame, run.provenance))
        nu_row = pd.DataFrame([nu_fit.model_dump()])
        run.record(write_table(run.path("nu_fit.csv"), nu_row, run.provenance))

    run.run(Stage.LIKELIHOOD, ["residuals.csv", "nu_fit.csv"], residuals, requires=[ml])

    def profile():
        cs, _ = pair
        values = s2_profile(result.k, cs.mean_r2)
        horizons = np.array(section.profile_q or range(1, q + 1))
        if np.any((horizons < 1) | (horizons > q)):
            raise ConfigError(f"profile_q must lie in 1..{q}.")

        columns: dict[str, Any] = {"q": horizons, "s2": values[horizons - 1]}
        try:
            fit = fit_s2_profile(result.k, cs.mean_r2)
        except QarchError as err:
            logger.warning(f"Baseline profile fit skipped: {err}")
        else:
            logger.info(
                f"Baseline profile: s_inf2={fit.s_inf2:.4f}, alpha={fit.alpha:.3f}, "
                f"g={fit.g:.4f}, q0={fit.q0:.1f}."
            )
            columns["s2_fit"] = fit.evaluate(horizons)

        run.record(write_table(run.path("profile.csv"), columns, run.provenance))

    run.run(Stage.PROFILE, ["profile.csv"], profile, requires=[result])

    for name in section.families:
        artifact = f"families/{name.replace(':', '_')}.csv"

        def family(name=name, artifact=artifact):
            spec = family_from_name(name, q)
            fitted = restricted_ml(spec, pool, result.kernel().diagonal_only(), config.nu)
            run.record(_write_params(fitted, run.path(artifact), run.provenance))

        run.run(Stage.FAMILIES, [artifact], family, requires=[result])

    def harness():
        settings = EstimatorSettings(
            q_diag=q,
            q_off=section.q_off,
            nu=config.nu,
            max_lag_d=max_lag_d,
            r_cut=section.r_cut,
            amplitude=section.amplitude,
        )
        estimators = {name: make_estimator(name, settings) for name in section.estimators}
        report = is_oos_harness(
            pool,
            section.split_mode,
            section.n_samplings,
            estimators,
            q,
            nu=config.nu,
            seed=config.seed,
            threads=config.threads,
            progress=True,
        )
        ranking = report.summary.sort_values("oos_mean", ascending=False)["estimator"]
        logger.info(f"Out-of-sample ranking: {' > '.join(ranking)}.")
        run.record(write_table(run.path("likelihood.csv"), report.summary, run.provenance))
        run.record(
            write_table(run.path("likelihood_samplings.csv"), report.samplings, run.provenance)
        )

    run.run(
        Stage.HARNESS,
        ["likelihood.csv", "likelihood_samplings.csv"],
        harness,
        requires=[data],
    )
    run.finish(cli_ctx)


def _write_params(result: EstimationResult, path: Path, provenance: Provenance) -> Path:
    columns = {
        "label": list(result.labels),
        "value": result.params,
        "se": result.param_se,
        "significant": result.significant,
    }
    path = write_table(path, columns, provenance)
    logger.info(
        f"{path.name}: loglik={result.loglik_is:.6f}, "
        f"{int(result.significant.sum())}/{result.n_params} significant, aic={result.aic:.6f}."
    )
    return path


@cli.command(short_help="Moments, spectrum and time-reversal analysis")
@ape_cli_context()
@config_options(AnalyzeConfig)
def analyze(cli_ctx, config_file, **flags):
    """
    Stability and moment report of a kernel, frontier scan, eigen-spectrum,
    time-reversal asymmetry and aftershock relaxation.
    """
    config = _resolve(cli_ctx, "analyze", config_file, flags)
    section = config.analyze
    run = RunArtifacts("analyze", config)
    residual = _residual(section.residual, config.nu)
    kernel = None
    if section.kernel_file is not None:
        kernel = run.run(
            Stage.LOAD,
            ["moments.csv", "spectrum.csv", "eigenvectors.csv"],
            lambda: read_kernel(section.kernel_file),
        )

    def moments():
        second = second_moment(kernel, residual)
        positivity = positivity_check(kernel)
        try:
            fourth = fourth_moment(kernel, residual)
        except MomentError as err:
            logger.warning(f"Fourth moment not computed: {err}")
            fourth = MomentReport(sigma2_mean=second.sigma2_mean, stable2=second.stable2)

        if fourth.stable4 is False:
            logger.warning("Fourth moment diverges for this kernel.")

        row = {
            "q": kernel.q,
            "trace": kernel.trace,
            "positive": positivity.definite,
            "stable2": second.stable2,
            "sigma2_mean": second.sigma2_mean,
            "stable4": fourth.stable4,
            "sigma4_mean": fourth.sigma4_mean,
            "sigma4_ratio": fourth.sigma4_ratio,
            "kurtosis": fourth.kurtosis,
            "det_sign": fourth.det_sign,
            "rcond": fourth.rcond,
        }
        run.record(write_table(run.path("moments.csv"), pd.DataFrame([row]), run.provenance))

    def spectrum():
        run.record(write_spectrum(eigendecompose(kernel), run.directory, run.provenance))

    if kernel is not None:
        run.run(Stage.MOMENTS, ["moments.csv"], moments)
        run.run(Stage.SPECTRUM, ["spectrum.csv", "eigenvectors.csv"], spectrum)

    def frontier():
        scan = frontier_scan(section.alphas, section.frontier_q, residual)
        run.record(write_table(run.path("frontier.csv"), scan, run.provenance))

    run.run(Stage.FRONTIER, ["frontier.csv"], frontier)

    bundle = None
    if section.path_file is not None:
        bundle = run.run(
            Stage.LOAD, ["tri.csv", "aftershock.csv"], lambda: read_path(section.path_file)
        )

    panel = None
    if section.manifest is not None:
        panel = run.run(
            Stage.LOAD, ["tri.csv"], lambda: _load_panel(section.manifest, config.threads)
        )

    def tri():
        max_tau = section.max_tau
        if bundle is not None:
            vol2 = bundle.rs_vol if bundle.rs_vol is not None else bundle.sigma2
            series = [(bundle.returns, vol2)]
        else:
            series = list(zip(panel.returns, panel.vol2))

        bootstrap = len(series) == 1 and section.n_boot > 1
        reports = []
        for returns, vol2 in series:
            cs = compute_correlations(returns, vol2, max_lag=2 * max_tau, max_lag_d=0)
            leverage = None
            if kernel is not None and kernel.has_leverage:
                leverage = np.pad(kernel.L, (0, max(0, max_tau - kernel.q)))

            reports.append(
                tri_delta(
                    cs,
                    returns=returns if bootstrap else None,
                    vol2=vol2 if bootstrap else None,
                    leverage=leverage,
                    max_tau=max_tau,
                    n_boot=section.n_boot,
                    block=section.block,
                    seed=config.seed,
                )
            )

        deltas = np.array([report.delta for report in reports])
        if len(reports) == 1:
            se = reports[0].se
        else:
            se = deltas.std(axis=0, ddof=1) / np.sqrt(len(reports))

        columns: dict[str, Any] = {"tau": np.arange(max_tau + 1), "delta": deltas.mean(axis=0)}
        if se is not None:
            columns["se"] = se

        if reports[0].leverage_part is not None:
            columns["leverage_part"] = np.mean([r.leverage_part for r in reports], axis=0)

        if kernel is not None and section.omega_variance > 0:
            omega = OmegaSpec(variance=section.omega_variance, ar_coefficient=section.omega_ar)
            c_omega = omega.correlation(kernel.q + max_tau)
            columns["omega_correction"] = omega_tri_correction(
                kernel.diagonal, c_omega, max_tau
            )

        run.record(write_table(run.path("tri.csv"), columns, run.provenance))

    if bundle is not None or panel is not None:
        run.run(Stage.TRI, ["tri.csv"], tri)

    def aftershock():
        curve = aftershock_curve(bundle, section.thresholds)
        run.record(write_table(run.path("aftershock.csv"), curve, run.provenance))

    if bundle is not None:
        run.run(Stage.AFTERSHOCK, ["aftershock.csv"], aftershock)

    run.finish(cli_ctx)


@cli.command(short_help="Write calibration/test splits")
@ape_cli_context()
@config_options(SplitsConfig)
def splits(cli_ctx, config_file, **flags):
    """
    Write the split table used by the in-sample / out-of-sample harness.
    """
    config = _resolve(cli_ctx, "splits", config_file, flags)
    section = config.splits
    run = RunArtifacts("splits", config)

    def write():
        names = None
        if section.manifest is not None:
            panel = load_panel(section.manifest, threads=config.threads)
            n_series, n_dates, names = panel.n_series, panel.n_dates, panel.names
        elif section.n_series is not None and section.n_dates is not None:
            n_series, n_dates = section.n_series, section.n_dates
        else:
            raise ConfigError("Splits need a manifest or both n_series and n_dates.")

        table = make_splits(
            n_series, n_dates, section.split_mode, section.n_samplings, config.seed, section.q
        )
        run.record(write_splits(table, run.path("splits.csv"), names, run.provenance))

    run.run(Stage.LOAD, ["splits.csv"], write)
    run.finish(cli_ctx)
