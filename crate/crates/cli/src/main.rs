use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tvarch_core::estimate::level_weights;
use tvarch_core::experiment::{run_experiment, Design, ExperimentSpec};
use tvarch_core::hypothesis::{
    test_constancy, test_second_order, test_zero_wald, Calibration, Gamma, TestOptions, TestReport,
    SCHEMA_VERSION,
};
use tvarch_core::ingest::{load_series, write_series, Column, IngestSpec, InputMode};
use tvarch_core::model::{CoefficientFunction, CoefficientPartition, NoiseSpec, ReturnSeries, TvArchModel};
use tvarch_core::pipeline::{run_pipeline, PipelineOptions};
use tvarch_core::select::{
    cv_bandwidth_semiparametric, cv_bandwidth_tvarch, select_lag_order, BandwidthGrid, CvPoint,
};
use tvarch_core::simulate::{simulate_path, SimulationConfig, DEFAULT_BURN_IN};
use tvarch_core::{fit_semiparametric, Error, FitOptions, WeightScheme};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "tvarch", version, about = "Semiparametric estimation and tests for time-varying ARCH models")]
struct Cli {
    /// Emit JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Write the output to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a tv-ARCH path and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a (semi)parametric tv-ARCH model.
    Fit(FitArgs),
    /// Test that the constant block of a partition is constant over time.
    TestConstancy(ConstancyArgs),
    /// Wald test that the constant block is zero.
    TestZero(ZeroArgs),
    /// Test for the absence of second-order dynamics.
    TestDynamic(DynamicArgs),
    /// Select the lag order with the information criterion.
    SelectOrder(SelectOrderArgs),
    /// Cross-validated bandwidth.
    SelectBandwidth(SelectBandwidthArgs),
    /// Order selection, constancy tests, fit and dynamic test in one run.
    Pipeline(PipelineArgs),
    /// Monte-Carlo experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args, Serialize)]
struct InputArgs {
    /// CSV file with prices or returns.
    #[arg(long)]
    input: PathBuf,
    /// Column name or 0-based index (default: first numeric column).
    #[arg(long)]
    column: Option<Column>,
    #[arg(long, default_value = "returns")]
    mode: InputMode,
    /// Multiplier applied to the returns.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

impl InputArgs {
    fn load(&self) -> tvarch_core::Result<ReturnSeries> {
        let mut spec = IngestSpec::new(&self.input);
        spec.column = self.column.clone();
        spec.mode = self.mode;
        spec.scale = self.scale;
        load_series(&spec)
    }
}

#[derive(Args, Serialize)]
struct BandwidthArgs {
    /// Fixed bandwidth b in (0, 1].
    #[arg(long, conflicts_with = "cv")]
    bandwidth: Option<f64>,
    /// Select b by cross-validation (the default when no bandwidth is given).
    #[arg(long)]
    cv: bool,
    /// CV grid multipliers c (bandwidths c·T^(-1/3)).
    #[arg(long, default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    grid: BandwidthGrid,
}

#[derive(Args, Serialize)]
struct McArgs {
    /// Monte-Carlo replicates.
    #[arg(long = "B", default_value_t = 2000)]
    replicates: usize,
    /// Significance levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.10])]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Sample size T.
    #[arg(long = "t")]
    t_len: usize,
    /// Coefficient functions a_0, a_1, .. in order: `0.3`, `sin:level,amp[,freq]`,
    /// `cos:level,amp[,freq]`, `pw:u/v,u/v,..`.
    #[arg(long = "coef", num_args = 1.., required_unless_present = "model")]
    coefficients: Vec<CoefficientFunction>,
    /// JSON model file (alternative to --coef).
    #[arg(long, conflicts_with = "coefficients")]
    model: Option<PathBuf>,
    /// `gaussian` or `t(nu)`.
    #[arg(long, default_value = "gaussian")]
    noise: NoiseSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// e.g. `varying=0 constant=1,2` (default: time-varying intercept, constant lags).
    #[arg(long)]
    partition: Option<CoefficientPartition>,
    #[command(flatten)]
    bandwidth: BandwidthArgs,
    /// Bandwidth b' of the intercept step (default: b).
    #[arg(long)]
    alpha_bandwidth: Option<f64>,
    /// Second-step plug-in estimators with weights 1/σ̂⁴.
    #[arg(long)]
    plug_in: bool,
    #[arg(long, default_value = "level-inverse")]
    weights: WeightScheme,
    /// Write the estimated coefficient paths (u, a_0(u), ..) to this CSV.
    #[arg(long)]
    path_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ConstancyArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Constant block under the null (default: all lags).
    #[arg(long)]
    partition: Option<CoefficientPartition>,
    #[command(flatten)]
    bandwidth: BandwidthArgs,
    #[command(flatten)]
    mc: McArgs,
    /// `identity` or `estimated` (estimated variance of the constant block).
    #[arg(long, default_value = "identity")]
    gamma: String,
    #[arg(long, default_value = "level-inverse")]
    weights: WeightScheme,
}

#[derive(Args, Serialize)]
struct ZeroArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Block tested to be zero is the constant block (default: all lags).
    #[arg(long)]
    partition: Option<CoefficientPartition>,
    #[command(flatten)]
    bandwidth: BandwidthArgs,
    #[command(flatten)]
    mc: McArgs,
    #[arg(long, default_value = "level-inverse")]
    weights: WeightScheme,
}

#[derive(Args, Serialize)]
struct DynamicArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[command(flatten)]
    bandwidth: BandwidthArgs,
    #[command(flatten)]
    mc: McArgs,
    /// `mc` or `asymptotic`.
    #[arg(long, default_value = "mc")]
    calibration: Calibration,
}

#[derive(Args, Serialize)]
struct SelectOrderArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 10)]
    max_order: usize,
    #[arg(long, default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    grid: BandwidthGrid,
}

#[derive(Args, Serialize)]
struct SelectBandwidthArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// `tv` (every coefficient time-varying) or `sptv` (constant lags).
    #[arg(long, default_value = "tv")]
    model: String,
    #[arg(long, default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    grid: BandwidthGrid,
    /// Write the CV curve (bandwidth, score) to this CSV.
    #[arg(long)]
    curve_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 10)]
    max_order: usize,
    #[arg(long, default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    grid: BandwidthGrid,
    #[command(flatten)]
    mc: McArgs,
    /// Report first-step instead of plug-in estimates.
    #[arg(long)]
    no_plug_in: bool,
}

#[derive(Args, Serialize)]
struct ExperimentArgs {
    /// rmse | constancy-power | dynamic-coverage | order-selection
    #[arg(long)]
    design: Design,
    #[arg(long, default_value_t = 1)]
    setup: u8,
    /// Sample sizes.
    #[arg(long = "t", value_delimiter = ',', required = true)]
    t_lens: Vec<usize>,
    /// Replications per sample size.
    #[arg(long = "R", default_value_t = 200)]
    replications: usize,
    #[arg(long, default_value = "gaussian")]
    noise: NoiseSpec,
    #[command(flatten)]
    mc: McArgs,
    #[arg(long, default_value_t = 10)]
    max_order: usize,
    /// Alternative strength (constancy setup 3, dynamic coverage).
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long, default_value_t = 1)]
    true_order: usize,
    /// Coefficient indices tested for constancy (default: all).
    #[arg(long, value_delimiter = ',')]
    tested: Option<Vec<usize>>,
    #[arg(long, default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    grid: BandwidthGrid,
    /// Also write the table cells as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// JSON envelope: the echoed arguments plus the result.
#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a C,
    result: R,
}

struct Output {
    json: String,
    text: String,
    /// Late numerical failure reported after the partial output is written.
    failure: Option<String>,
}

fn emit<C: Serialize, R: Serialize>(command: &str, config: &C, result: R, text: String) -> tvarch_core::Result<Output> {
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        config,
        result,
    };
    let mut json = serde_json::to_string_pretty(&envelope)?;
    json.push('\n');
    Ok(Output {
        json,
        text,
        failure: None,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(late)) => {
            eprintln!("error: {late}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(EXIT_NUMERICAL)
            } else {
                ExitCode::from(EXIT_INPUT)
            }
        }
    }
}

/// Returns the late numerical failure, if any, after writing the output.
fn run(cli: &Cli) -> tvarch_core::Result<Option<String>> {
    let output = match &cli.command {
        Command::Simulate(a) => simulate(a, cli.out.as_deref())?,
        Command::Fit(a) => fit(a)?,
        Command::TestConstancy(a) => constancy(a)?,
        Command::TestZero(a) => zero(a)?,
        Command::TestDynamic(a) => dynamic(a)?,
        Command::SelectOrder(a) => select_order(a)?,
        Command::SelectBandwidth(a) => select_bandwidth(a)?,
        Command::Pipeline(a) => pipeline(a)?,
        Command::Experiment(a) => experiment(a)?,
    };
    let body = if cli.json { &output.json } else { &output.text };
    // simulate writes its CSV to --out itself
    match (&cli.out, &cli.command) {
        (Some(path), c) if !matches!(c, Command::Simulate(_)) => std::fs::write(path, body)?,
        _ => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(output.failure)
}

fn check_bandwidth(b: f64) -> tvarch_core::Result<f64> {
    if b > 0.0 && b <= 1.0 {
        Ok(b)
    } else {
        Err(Error::InvalidInput(format!("bandwidth must lie in (0, 1], got {b}")))
    }
}

/// Bandwidth from the flags: fixed, or CV for the full or the
/// semiparametric model. Returns the CV curve when CV was run.
fn resolve_bandwidth(
    series: &ReturnSeries,
    p: usize,
    args: &BandwidthArgs,
    semiparametric: bool,
) -> tvarch_core::Result<(f64, Option<Vec<CvPoint>>)> {
    if let Some(b) = args.bandwidth {
        return Ok((check_bandwidth(b)?, None));
    }
    let w = level_weights(series, p)?;
    if semiparametric && p > 0 {
        let cv = cv_bandwidth_semiparametric(series, p, &args.grid, &w)?;
        Ok((cv.bandwidth, Some(cv.curve)))
    } else {
        let cv = cv_bandwidth_tvarch(series, p, &args.grid, &w)?;
        Ok((cv.bandwidth, Some(cv.curve)))
    }
}

fn resolve_partition(p: usize, partition: &Option<CoefficientPartition>) -> tvarch_core::Result<CoefficientPartition> {
    match partition {
        Some(part) => part.extended(p),
        None => Ok(CoefficientPartition::intercept_varying(p)),
    }
}

fn test_options(b: f64, mc: &McArgs, weights: WeightScheme) -> TestOptions {
    TestOptions::new(b)
        .replicates(mc.replicates)
        .levels(mc.alpha.clone())
        .seed(mc.seed)
        .weights(weights)
}

fn simulate(a: &SimulateArgs, out: Option<&Path>) -> tvarch_core::Result<Output> {
    let model = match &a.model {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let mut m: TvArchModel = serde_json::from_str(&text)?;
            m = TvArchModel::new(m.coefficients, m.noise)?;
            m
        }
        None => TvArchModel::new(a.coefficients.clone(), a.noise)?,
    };
    let config = SimulationConfig {
        t_len: a.t_len,
        seed: a.seed,
        burn_in: a.burn_in,
    };
    let series = simulate_path(&model, &config)?;
    let mut csv = Vec::new();
    write_series(&mut csv, &series)?;
    let text = match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            format!("wrote {} observations to {}\n", series.len(), path.display())
        }
        None => String::from_utf8(csv).expect("csv output is utf-8"),
    };
    #[derive(Serialize)]
    struct Sim<'a> {
        model: &'a TvArchModel,
        simulation: SimulationConfig,
        values: &'a [f64],
    }
    eprintln!("{}", serde_json::to_string(&serde_json::json!({ "model": &model, "simulation": config }))?);
    emit(
        "simulate",
        a,
        Sim {
            model: &model,
            simulation: config,
            values: series.values(),
        },
        text,
    )
}

fn fit(a: &FitArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let part = resolve_partition(a.p, &a.partition)?;
    let semiparametric = part == CoefficientPartition::intercept_varying(part.p());
    let (b, curve) = resolve_bandwidth(&series, part.p(), &a.bandwidth, semiparametric)?;
    let mut opts = FitOptions::new(b).with_plug_in(a.plug_in);
    opts.weights = a.weights;
    opts.alpha_bandwidth = a.alpha_bandwidth.map(check_bandwidth).transpose()?;
    let fit = fit_semiparametric(&series, &part, &opts)?;

    let grid = fit.grid();
    if let Some(path) = &a.path_csv {
        let mut s = String::from("u");
        for j in 0..=part.p() {
            s.push_str(&format!(",a{j}"));
        }
        s.push('\n');
        let paths: Vec<Vec<f64>> = (0..=part.p()).filter_map(|j| fit.coefficient_path(j)).collect();
        for (k, u) in grid.iter().enumerate() {
            s.push_str(&format!("{u:?}"));
            for path in &paths {
                s.push_str(&format!(",{:?}", path[k]));
            }
            s.push('\n');
        }
        std::fs::write(path, s)?;
    }

    let mut text = format!(
        "T = {}, partition {}, b = {:.4}{}{}\n",
        series.len(),
        part,
        fit.bandwidth,
        if curve.is_some() { " (cv)" } else { "" },
        if fit.plug_in { ", plug-in" } else { "" }
    );
    for (k, j) in part.constant().iter().enumerate() {
        text.push_str(&format!("  a_{j} = {:>10.5}  (s.e. {:.5})\n", fit.beta[k], fit.beta_se[k]));
    }
    for (k, j) in part.varying().iter().enumerate() {
        let path: Vec<f64> = fit.alpha.iter().map(|a| a[k]).collect();
        let mean = path.iter().sum::<f64>() / path.len() as f64;
        let min = path.iter().copied().fold(f64::INFINITY, f64::min);
        let max = path.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        text.push_str(&format!(
            "  a_{j}(u): mean {mean:.5}, min {min:.5}, max {max:.5}\n"
        ));
    }
    #[derive(Serialize)]
    struct FitResult<'a> {
        cv_curve: Option<Vec<CvPoint>>,
        fit: &'a tvarch_core::SemiparametricFit,
    }
    emit("fit", a, FitResult { cv_curve: curve, fit: &fit }, text)
}

fn report_output<C: Serialize>(command: &str, config: &C, report: TestReport) -> tvarch_core::Result<Output> {
    let text = report.to_table();
    emit(command, config, report, text)
}

fn constancy(a: &ConstancyArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let part = resolve_partition(a.p, &a.partition)?;
    let gamma = match a.gamma.as_str() {
        "identity" => Gamma::Identity,
        "estimated" => Gamma::EstimatedVariance,
        other => return Err(Error::InvalidInput(format!("unknown gamma '{other}'"))),
    };
    let (b, _) = resolve_bandwidth(&series, part.p(), &a.bandwidth, false)?;
    let report = test_constancy(&series, &part, &test_options(b, &a.mc, a.weights), &gamma)?;
    report_output("test-constancy", a, report)
}

fn zero(a: &ZeroArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let part = resolve_partition(a.p, &a.partition)?;
    let (b, _) = resolve_bandwidth(&series, part.p(), &a.bandwidth, false)?;
    let report = test_zero_wald(&series, &part, &test_options(b, &a.mc, a.weights))?;
    report_output("test-zero", a, report)
}

fn dynamic(a: &DynamicArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let (b, _) = resolve_bandwidth(&series, a.p, &a.bandwidth, true)?;
    let report = test_second_order(&series, a.p, &test_options(b, &a.mc, WeightScheme::Unit), a.calibration)?;
    report_output("test-dynamic", a, report)
}

fn select_order(a: &SelectOrderArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let sel = select_lag_order(&series, a.max_order, &a.grid)?;
    let mut text = format!(
        "b = {:.4} (cv at q = {}), zeta = {:.6}\n   p   C(p)\n",
        sel.bandwidth, sel.max_order, sel.zeta
    );
    for (p, c) in sel.criterion.iter().enumerate() {
        let mark = if p == sel.p_hat { "  <" } else { "" };
        match c {
            Some(c) => text.push_str(&format!("  {p:>2}   {c:.6}{mark}\n")),
            None => text.push_str(&format!("  {p:>2}   singular\n")),
        }
    }
    text.push_str(&format!("selected p = {}\n", sel.p_hat));
    emit("select-order", a, sel, text)
}

fn curve_table(curve: &[CvPoint]) -> String {
    let mut s = String::from("bandwidth,score\n");
    for pt in curve {
        match pt.score {
            Some(v) => s.push_str(&format!("{:?},{:?}\n", pt.bandwidth, v)),
            None => s.push_str(&format!("{:?},\n", pt.bandwidth)),
        }
    }
    s
}

fn select_bandwidth(a: &SelectBandwidthArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let w = level_weights(&series, a.p)?;
    let (b, curve, beta) = match a.model.as_str() {
        "tv" => {
            let cv = cv_bandwidth_tvarch(&series, a.p, &a.grid, &w)?;
            (cv.bandwidth, cv.curve, None)
        }
        "sptv" => {
            let cv = cv_bandwidth_semiparametric(&series, a.p, &a.grid, &w)?;
            (cv.bandwidth, cv.curve, Some(cv.beta))
        }
        other => return Err(Error::InvalidInput(format!("model must be 'tv' or 'sptv', got '{other}'"))),
    };
    if let Some(path) = &a.curve_csv {
        std::fs::write(path, curve_table(&curve))?;
    }
    let mut text = format!("{}({}) cross-validation\n  bandwidth      score\n", a.model, a.p);
    for pt in &curve {
        let mark = if pt.bandwidth == b { "  <" } else { "" };
        match pt.score {
            Some(v) => text.push_str(&format!("  {:.5}   {v:.6e}{mark}\n", pt.bandwidth)),
            None => text.push_str(&format!("  {:.5}   singular\n", pt.bandwidth)),
        }
    }
    text.push_str(&format!("selected b = {b:.5}\n"));
    #[derive(Serialize)]
    struct Selection {
        bandwidth: f64,
        beta: Option<Vec<f64>>,
        curve: Vec<CvPoint>,
    }
    emit("select-bandwidth", a, Selection { bandwidth: b, beta, curve }, text)
}

fn pipeline(a: &PipelineArgs) -> tvarch_core::Result<Output> {
    let series = a.input.load()?;
    let opts = PipelineOptions {
        max_order: a.max_order,
        grid: a.grid.clone(),
        replicates: a.mc.replicates,
        levels: a.mc.alpha.clone(),
        seed: a.mc.seed,
        plug_in: !a.no_plug_in,
    };
    let report = run_pipeline(&series, &opts)?;
    let text = report.summary();
    let mut out = emit("pipeline", a, &report, text)?;
    out.failure = report.errors.first().cloned();
    Ok(out)
}

fn experiment(a: &ExperimentArgs) -> tvarch_core::Result<Output> {
    let mut spec = ExperimentSpec::new(a.design, a.t_lens.clone(), a.replications);
    spec.setup = a.setup;
    spec.noise = a.noise;
    spec.seed = a.mc.seed;
    spec.mc_replicates = a.mc.replicates;
    spec.levels = a.mc.alpha.clone();
    spec.max_order = a.max_order;
    spec.theta = a.theta;
    spec.true_order = a.true_order;
    spec.tested = a.tested.clone();
    spec.grid = a.grid.clone();
    let result = run_experiment(&spec)?;
    let csv = result.to_csv()?;
    if let Some(path) = &a.csv {
        std::fs::write(path, &csv)?;
    }
    let mut text = format!(
        "{} setup {} ({}), R = {}\n      T  cell                              value    mc s.e.\n",
        spec.design,
        spec.setup,
        spec.noise.label(),
        spec.replications
    );
    for c in &result.cells {
        text.push_str(&format!("  {:>5}  {:<30} {:>9.4}  {:>9.4}\n", c.t_len, c.name, c.value, c.mc_se));
    }
    for (t, f) in &result.failures {
        if *f > 0 {
            text.push_str(&format!("  T = {t}: {f} replications dropped after numerical failures\n"));
        }
    }
    emit("experiment", a, &result, text)
}
