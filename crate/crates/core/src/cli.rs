//! Command-line surface. The binary only calls [`main`].

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::behavioral::{calibration_table, fit_mle, resampled_calibration};
use crate::error::{Error, Result};
use crate::inference::{post_select_fit, run_pipeline, LambdaGrid, PipelineConfig};
use crate::output::{write_calibration_csv, write_coefficient_table, write_coverage_csv, write_inference_csv, write_path_csv};
use crate::policy::MaskedPolicy;
use crate::relspar::{adaptive_weights, lambda_max, lambda_path, log_grid, select_lambda, PathPoint, ThresholdRule};
use crate::simulate::{coverage_study, gen_dataset, CoverageOptions, SimConfig};
use crate::trajectories::{
    load_dataset, scale_states, write_dataset, CsvSchema, Dataset, RewardRule, DEFAULT_SPLIT_FRACTIONS,
};
use crate::trpo::{fit_trpo_with, FitConfig};
use crate::value::{value_of, ValueEstimate};
use crate::ActiveMask;

#[derive(Debug, Parser, Serialize)]
#[command(name = "relsparse", version, about = "Relatively sparse policies with post-selection inference")]
pub struct Cli {
    /// Worker threads for grid cells and replications.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate trajectories from the known generative model.
    Simulate(SimulateArgs),
    /// Fit the behavioral logistic policy by maximum likelihood.
    FitBehavioral(FitBehavioralArgs),
    /// Fit the relative-sparsity path over a lambda grid.
    Path(PathArgs),
    /// Pick lambda from a path written by `path`.
    SelectLambda(SelectLambdaArgs),
    /// Full split, select, refit and infer pipeline.
    Pipeline(PipelineArgs),
    /// Refit on a given active set and report confidence intervals.
    Infer(InferArgs),
    /// Monte-Carlo coverage of the post-selection intervals.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    /// Last decision time; each trajectory has T + 1 decisions.
    #[arg(long = "T", default_value_t = 2)]
    pub horizon: usize,
    /// Defaults to the length of --b0.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.3,0.2")]
    pub b0: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct InputArgs {
    /// Trajectory CSV with columns id, t, s1..sK, a, r.
    #[arg(long)]
    pub input: PathBuf,
    /// Reward rule: column(name), next_state_component(j) or
    /// neg_current_component_times_action(j).
    #[arg(long, default_value = "column(r)")]
    pub reward: String,
    /// State columns in order; defaults to the s1, s2, ... columns present.
    #[arg(long, value_delimiter = ',')]
    pub states: Option<Vec<String>>,
    /// Divide each state dimension by its pooled sd before fitting.
    #[arg(long)]
    pub scale: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitBehavioralArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Also average held-out calibration over this many random halvings.
    #[arg(long, default_value_t = 0)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PathArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Held-out trajectories for the test value column.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Explicit lambda values; log-spaced from lambda_max when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub lambda_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleArg {
    Se,
    Sd,
}

impl From<RuleArg> for ThresholdRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Se => ThresholdRule::StandardError,
            RuleArg::Sd => ThresholdRule::StandardDeviation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SelectLambdaArgs {
    /// `path.json` written by the `path` command.
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, value_enum, default_value_t = RuleArg::Se)]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.01,3,6")]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    pub deltas: Vec<f64>,
    /// Use this gamma instead of the automatic choice (needs --delta).
    #[arg(long, requires = "delta")]
    pub gamma: Option<f64>,
    #[arg(long, requires = "gamma")]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    pub lambda_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    pub band_threshold: f64,
    #[arg(long)]
    pub inference_gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = RuleArg::Se)]
    pub rule: RuleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// 1-based coordinates allowed to differ from behavior.
    #[arg(long, value_delimiter = ',', required = true)]
    pub active: Vec<usize>,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.01,3,6")]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub replications: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long = "T", default_value_t = 2)]
    pub horizon: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.3,0.2")]
    pub b0: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// 1-based active coordinates.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub active: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub n_ref: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub flags: &'a Cli,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: &'static str,
    pub wall_time_secs: f64,
}

/// Files produced by a command, relative to its output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let f = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(rel.to_string());
        Ok(BufWriter::new(f))
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let w = self.create(rel)?;
        serde_json::to_writer_pretty(w, value)?;
        Ok(())
    }
}

fn parse_reward(s: &str) -> Result<RewardRule> {
    s.parse()
}

fn read_input(args: &InputArgs) -> Result<(Dataset, Vec<String>)> {
    let reward = parse_reward(&args.reward)?;
    let headers = {
        let mut rdr = csv::Reader::from_path(&args.input).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(args.input.display().to_string(), io),
            other => Error::InvalidArgument(format!("{}: {other:?}", args.input.display())),
        })?;
        rdr.headers()?.iter().map(|h| h.trim().to_string()).collect::<Vec<_>>()
    };
    let mut schema = CsvSchema::from_headers(&headers, Some(reward));
    if let Some(states) = &args.states {
        schema.states = states.clone();
    }
    if schema.states.is_empty() {
        return Err(Error::MissingColumn("s1".into()));
    }
    let d = load_dataset(&args.input, &schema)?;
    let d = if args.scale { scale_states(&d)? } else { d };
    Ok((d, schema.states))
}

fn lambdas_for(grid: &Option<Vec<f64>>, count: usize, ratio: f64) -> LambdaGrid {
    match grid {
        Some(v) => LambdaGrid::Fixed(v.clone()),
        None => LambdaGrid::Auto { count, ratio },
    }
}

fn check_gammas(gammas: &[f64]) -> Result<()> {
    for &g in gammas {
        FitConfig::new(g).validate()?;
    }
    Ok(())
}

fn sim_config(n: usize, horizon: usize, k: Option<usize>, b0: &[f64], tau: f64, seed: u64) -> Result<SimConfig> {
    if let Some(k) = k {
        if k != b0.len() {
            return Err(Error::InvalidArgument(format!(
                "--K {k} does not match the {} coefficients in --b0",
                b0.len()
            )));
        }
    }
    let mut cfg = SimConfig::with_coefficients(n, horizon, b0.to_vec(), seed);
    cfg.tau = vec![tau; cfg.k];
    cfg.validate()?;
    Ok(cfg)
}

/// The JSON written by `path` and read back by `select-lambda`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PathFile {
    pub gamma: f64,
    pub delta: f64,
    pub behavioral_value: ValueEstimate,
    pub points: Vec<PathPoint>,
}

fn cmd_simulate(a: &SimulateArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    let cfg = sim_config(a.n, a.horizon, a.k, &a.b0, a.tau, a.seed)?;
    let d = gen_dataset(&cfg)?;
    let o = out.insert(Outputs::new(&a.out)?);
    write_dataset(&d, o.create("trajectories.csv")?)?;
    Ok(Some(a.seed))
}

fn cmd_fit_behavioral(a: &FitBehavioralArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    let (d, names) = read_input(&a.input)?;
    let fit = fit_mle(&d)?;
    let (lo, hi) = fit.wald_intervals(a.level)?;
    let se = fit.standard_errors();
    let bins = calibration_table(&fit.b_n, &d, a.bins)?;
    let resampled = match a.repeats {
        0 => None,
        r => Some(resampled_calibration(&d, a.bins, r, a.seed)?),
    };
    let o = out.insert(Outputs::new(&a.out)?);
    o.json("behavioral.json", &fit)?;
    let mut w = csv::Writer::from_writer(o.create("behavioral.csv")?);
    w.write_record(["covariate", "coefficient", "se", "ci_low", "ci_high"])?;
    for (j, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            fit.b_n.coefficients[j].to_string(),
            se[j].to_string(),
            lo[j].to_string(),
            hi[j].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("behavioral.csv", e))?;
    write_calibration_csv(&bins, o.create("calibration.csv")?)?;
    match resampled {
        Some(t) => {
            write_calibration_csv(&t, o.create("calibration_resampled.csv")?)?;
            Ok(Some(a.seed))
        }
        None => Ok(None),
    }
}

fn cmd_path(a: &PathArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    check_gammas(&[a.gamma])?;
    let (d, _) = read_input(&a.input)?;
    let test = match &a.test {
        Some(p) => Some(read_input(&InputArgs { input: p.clone(), ..a.input.clone() })?.0),
        None => None,
    };
    let behavioral = fit_mle(&d).map_err(|e| e.in_stage("behavioral fit"))?;
    let b = &behavioral.b_n;
    let cfg = FitConfig::new(a.gamma).with_delta(a.delta);
    let pilot = fit_trpo_with(b, &d, &ActiveMask::all(d.dim()), &cfg).map_err(|e| e.in_stage("pilot fit"))?;
    let weights = adaptive_weights(&pilot.beta, b, a.delta)?;
    let lambdas = match lambdas_for(&a.lambda_grid, a.lambda_count, a.lambda_ratio) {
        LambdaGrid::Fixed(mut v) => {
            v.sort_by(f64::total_cmp);
            v
        }
        LambdaGrid::Auto { count, ratio } => {
            let top = lambda_max(b, &d, a.gamma, &weights)?;
            if top > 0.0 {
                log_grid(top * ratio, top, count)?
            } else {
                vec![0.0]
            }
        }
    };
    let points = lambda_path(&behavioral, &d, test.as_ref(), &cfg, &weights, &lambdas).map_err(|e| e.in_stage("path"))?;
    let behavioral_value = value_of(&MaskedPolicy::behavioral(b), b, &d)?;
    let o = out.insert(Outputs::new(&a.out)?);
    write_path_csv(&points, d.dim(), o.create("path.csv")?)?;
    o.json("path.json", &PathFile { gamma: a.gamma, delta: a.delta, behavioral_value, points })?;
    o.json("weights.json", &weights)?;
    Ok(None)
}

fn cmd_select_lambda(a: &SelectLambdaArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    let text = fs::read_to_string(&a.path).map_err(|e| Error::io(a.path.display().to_string(), e))?;
    let file: PathFile = serde_json::from_str(&text)?;
    let sel = select_lambda(&file.points, &file.behavioral_value, a.rule.into())?;
    if sel.no_qualifying_lambda {
        eprintln!("warning: no lambda reaches the value threshold; using the smallest lambda");
    }
    #[derive(Serialize)]
    struct Selected<'a> {
        #[serde(flatten)]
        selection: &'a crate::relspar::LambdaSelection,
        active_set: Vec<usize>,
        beta: &'a [f64],
    }
    let p = &file.points[sel.index];
    let o = out.insert(Outputs::new(&a.out)?);
    o.json(
        "selection.json",
        &Selected { selection: &sel, active_set: p.active_set.iter().map(|j| j + 1).collect(), beta: p.beta.as_slice() },
    )?;
    Ok(None)
}

fn cmd_pipeline(a: &PipelineArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    check_gammas(&a.gammas)?;
    let (d, names) = read_input(&a.input)?;
    let cfg = PipelineConfig {
        gammas: a.gammas.clone(),
        deltas: a.deltas.clone(),
        lambdas: lambdas_for(&a.lambda_grid, a.lambda_count, a.lambda_ratio),
        fixed: a.gamma.zip(a.delta),
        band_threshold: a.band_threshold,
        inference_gamma: a.inference_gamma,
        threshold_rule: a.rule.into(),
        split_fractions: DEFAULT_SPLIT_FRACTIONS,
        seed: a.seed,
        level: a.level,
        fit: FitConfig::new(1.0),
    };
    let report = run_pipeline(&d, &cfg)?;
    if report.no_qualifying_lambda {
        eprintln!("warning: no lambda reaches the value threshold; using the smallest lambda");
    }
    let o = out.insert(Outputs::new(&a.out)?);
    for cell in &report.cells {
        write_path_csv(&cell.path, d.dim(), o.create(&format!("diagrams/{}_{}.csv", cell.gamma, cell.delta))?)?;
    }
    #[derive(Serialize)]
    struct Selection<'a> {
        choice_mode: crate::inference::ChoiceMode,
        gamma: f64,
        delta: f64,
        lambda: f64,
        no_qualifying_lambda: bool,
        /// 1-based.
        active_set: Vec<usize>,
        active_covariates: Vec<&'a str>,
        split: &'a crate::trajectories::SplitSpec,
        cells: Vec<CellSummary>,
    }
    #[derive(Serialize)]
    struct CellSummary {
        gamma: f64,
        delta: f64,
        pilot: Vec<f64>,
        lambdas: Vec<f64>,
        selected_index: usize,
        max_sd_band: f64,
    }
    o.json(
        "selection.json",
        &Selection {
            choice_mode: report.choice_mode,
            gamma: report.gamma,
            delta: report.delta,
            lambda: report.lambda,
            no_qualifying_lambda: report.no_qualifying_lambda,
            active_set: report.selected_active_set.iter().map(|j| j + 1).collect(),
            active_covariates: report.selected_active_set.iter().map(|&j| names[j].as_str()).collect(),
            split: &report.split,
            cells: report
                .cells
                .iter()
                .map(|c| CellSummary {
                    gamma: c.gamma,
                    delta: c.delta,
                    pilot: c.pilot.as_slice().to_vec(),
                    lambdas: c.lambdas.clone(),
                    selected_index: c.selection.index,
                    max_sd_band: c.max_sd_band,
                })
                .collect(),
        },
    )?;
    write_inference_csv(&report.inference, &names, o.create("inference.csv")?)?;
    write_coefficient_table(&report.inference, &names, o.create("coefficients.csv")?)?;
    Ok(Some(a.seed))
}

fn one_based(active: &[usize], k: usize) -> Result<Vec<usize>> {
    active
        .iter()
        .map(|&j| {
            if j == 0 || j > k {
                Err(Error::InvalidArgument(format!("active coordinate {j} out of range 1..={k}")))
            } else {
                Ok(j - 1)
            }
        })
        .collect()
}

fn cmd_infer(a: &InferArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    check_gammas(&[a.gamma])?;
    let (d, names) = read_input(&a.input)?;
    let active = one_based(&a.active, d.dim())?;
    let res = post_select_fit(&d, &active, &FitConfig::new(a.gamma), a.level)?;
    let o = out.insert(Outputs::new(&a.out)?);
    write_inference_csv(&res, &names, o.create("inference.csv")?)?;
    write_coefficient_table(&res, &names, o.create("coefficients.csv")?)?;
    o.json("inference.json", &res)?;
    Ok(None)
}

fn cmd_coverage(a: &CoverageArgs, out: &mut Option<Outputs>) -> Result<Option<u64>> {
    check_gammas(&a.gammas)?;
    let cfg = sim_config(a.n, a.horizon, None, &a.b0, a.tau, a.seed)?;
    let active = one_based(&a.active, cfg.k)?;
    if a.replications < 30 {
        eprintln!("warning: {} replications give unstable coverage estimates", a.replications);
    }
    let mut reports = Vec::new();
    for &g in &a.gammas {
        let opts = CoverageOptions { level: a.level, n_ref: a.n_ref, ..CoverageOptions::new(a.replications) };
        let (r, _) = coverage_study(&cfg, g, &active, &opts).map_err(|e| e.in_stage(&format!("coverage at gamma={g}")))?;
        reports.extend(r);
    }
    let o = out.insert(Outputs::new(&a.out)?);
    write_coverage_csv(&reports, o.create("coverage.csv")?)?;
    Ok(Some(a.seed))
}

fn input_paths(cmd: &Command) -> Vec<String> {
    let show = |p: &Path| p.display().to_string();
    match cmd {
        Command::Simulate(_) | Command::Coverage(_) => Vec::new(),
        Command::FitBehavioral(a) => vec![show(&a.input.input)],
        Command::Path(a) => std::iter::once(&a.input.input).chain(a.test.iter()).map(|p| show(p)).collect(),
        Command::SelectLambda(a) => vec![show(&a.path)],
        Command::Pipeline(a) => vec![show(&a.input.input)],
        Command::Infer(a) => vec![show(&a.input.input)],
    }
}

/// Runs a parsed command line, writing outputs and the manifest.
pub fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let mut out = None;
    let (name, seed) = match &cli.command {
        Command::Simulate(a) => ("simulate", cmd_simulate(a, &mut out)?),
        Command::FitBehavioral(a) => ("fit-behavioral", cmd_fit_behavioral(a, &mut out)?),
        Command::Path(a) => ("path", cmd_path(a, &mut out)?),
        Command::SelectLambda(a) => ("select-lambda", cmd_select_lambda(a, &mut out)?),
        Command::Pipeline(a) => ("pipeline", cmd_pipeline(a, &mut out)?),
        Command::Infer(a) => ("infer", cmd_infer(a, &mut out)?),
        Command::Coverage(a) => ("coverage", cmd_coverage(a, &mut out)?),
    };
    let mut o = out.expect("every command writes outputs");
    let mut outputs = o.files.clone();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: name,
        flags: cli,
        seed,
        inputs: input_paths(&cli.command),
        outputs,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    o.json("manifest.json", &manifest)
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return 2;
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
