use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qrtd::bootstrap::{bootstrap_around, BootstrapOptions, BootstrapResult};
use qrtd::censor::fit_censor_km;
use qrtd::estimator::{fit, QuantileFit, SolverConfig};
use qrtd::io::{self, CurvePoint, InstrumentRule, NamedDataset};
use qrtd::sim::{self, ScenarioConfig, StudyConfig};

#[derive(Parser)]
#[command(name = "qrtd", version, about = "Censored quantile regression with time-dependent covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit β(q) for one or more quantiles.
    Fit(FitArgs),
    /// Fit with weighted-bootstrap standard errors and intervals.
    Bootstrap(BootArgs),
    /// Write a simulated dataset and its truth sidecar.
    Simulate(SimulateArgs),
    /// Monte-Carlo study of bias, spread and coverage.
    Study(StudyArgs),
    /// Kaplan–Meier curve of the censoring distribution.
    Km(KmArgs),
    /// Coefficient curves over a quantile grid, as CSV and SVG.
    Curves(CurvesArgs),
    /// Convert dated heart-transplant records to counting-process CSV.
    Stanford(StanfordArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Instrument {
    Columns,
    AtY,
}

impl From<Instrument> for InstrumentRule {
    fn from(i: Instrument) -> Self {
        match i {
            Instrument::Columns => InstrumentRule::Columns,
            Instrument::AtY => InstrumentRule::AtY,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Fixed,
    Random,
}

#[derive(Args)]
struct DataArgs {
    /// Counting-process CSV (id, start, stop, event, covariates..., z_*).
    input: PathBuf,
    #[arg(long, value_enum, default_value = "columns")]
    instrument: Instrument,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Logistic smoothing constant; omitted means 100 with the real-data solver preset.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use the lighter simulation solver preset.
    #[arg(long)]
    light: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut c = if self.light { SolverConfig::simulation() } else { SolverConfig::real_data() };
        if let Some(a) = self.a {
            c.smoothing_a = a;
        }
        c.with_seed(self.seed)
    }
}

#[derive(Args)]
struct QArgs {
    /// Quantile to fit.
    #[arg(long, conflicts_with = "q_grid")]
    q: Option<f64>,
    /// Grid lo:hi:step, inclusive.
    #[arg(long)]
    q_grid: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    qs: QArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write results JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    qs: QArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "fixed")]
    scenario: Scenario,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    censoring: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Truth sidecar; defaults to <out>.truth.csv.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, value_enum, default_value = "fixed")]
    scenario: Scenario,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "200")]
    n: Vec<usize>,
    /// Censoring targets, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    censoring: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 20.0)]
    a: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "0.15:0.85:0.05")]
    q_grid: String,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Directory for <coefficient>.csv and <coefficient>.svg.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StanfordArgs {
    /// Raw records with id, birth_date, accept_date, tx_date, fu_date, fustat, mscore.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad grid component '{p}'")))
        .collect::<Result<_>>()?;
    let [lo, hi, step] = parts[..] else { bail!("grid must be lo:hi:step, got '{s}'") };
    if !(step > 0.0 && hi >= lo) {
        bail!("grid needs step > 0 and hi >= lo, got '{s}'");
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12).collect())
}

fn quantiles(qs: &QArgs) -> Result<Vec<f64>> {
    let list = match (&qs.q, &qs.q_grid) {
        (_, Some(g)) => parse_grid(g)?,
        (Some(q), None) => vec![*q],
        (None, None) => vec![0.5],
    };
    if let Some(q) = list.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        bail!("quantiles must lie in (0, 1), got {q}");
    }
    Ok(list)
}

fn load(data: &DataArgs) -> Result<NamedDataset> {
    io::ingest_path(&data.input, data.instrument.into())
        .with_context(|| format!("reading {}", data.input.display()))
}

fn coefficient_names(d: &NamedDataset) -> Vec<String> {
    std::iter::once("intercept".to_string()).chain(d.covariate_names.iter().cloned()).collect()
}

/// Files are staged in memory and written together; a failure removes what was written.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, path: &Path, bytes: impl Into<Vec<u8>>) {
        self.0.push((path.to_path_buf(), bytes.into()));
    }

    fn commit(self) -> Result<()> {
        let mut written: Vec<PathBuf> = Vec::new();
        for (p, b) in &self.0 {
            if let Err(e) = io::write_atomic(p, b) {
                for w in &written {
                    let _ = std::fs::remove_file(w);
                }
                return Err(e).with_context(|| format!("writing {}", p.display()));
            }
            written.push(p.clone());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Interval {
    level: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    percentile_lower: Vec<f64>,
    percentile_upper: Vec<f64>,
}

#[derive(Serialize)]
struct Diagnostics {
    converged: bool,
    residual_norm: f64,
    n_events_used: usize,
    clamp_count: usize,
    start_index: usize,
    evaluations: usize,
    smoothing_a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_failed: Option<usize>,
}

#[derive(Serialize)]
struct QResult {
    q: f64,
    coefficients: Vec<String>,
    beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ci: Option<Interval>,
    diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    seed: u64,
    input: String,
    config: &'a SolverConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    replicates: Option<usize>,
    results: Vec<QResult>,
}

fn q_result(q: f64, names: &[String], f: &QuantileFit, boot: Option<&BootstrapResult>) -> QResult {
    QResult {
        q,
        coefficients: names.to_vec(),
        beta: f.beta().to_vec(),
        se: boot.map(|b| b.se.clone()),
        ci: boot.map(|b| Interval {
            level: b.level,
            lower: b.ci_lower.clone(),
            upper: b.ci_upper.clone(),
            percentile_lower: b.percentile_lower.clone(),
            percentile_upper: b.percentile_upper.clone(),
        }),
        diagnostics: Diagnostics {
            converged: f.converged,
            residual_norm: f.residual_norm,
            n_events_used: f.n_events_used,
            clamp_count: f.clamp_count,
            start_index: f.start_index,
            evaluations: f.evaluations,
            smoothing_a: f.smoothing_a,
            bootstrap_failed: boot.map(|b| b.n_failed),
        },
    }
}

fn print_table(results: &[QResult]) {
    let Some(first) = results.first() else { return };
    let mut header = format!("{:>6}", "q");
    for n in &first.coefficients {
        header += &format!(" {n:>24}");
    }
    println!("{header}");
    for r in results {
        let mut line = format!("{:>6.3}", r.q);
        for k in 0..r.beta.len() {
            let cell = match &r.ci {
                Some(ci) => format!("{:.3} ({:.3}, {:.3})", r.beta[k], ci.lower[k], ci.upper[k]),
                None => format!("{:.4}", r.beta[k]),
            };
            line += &format!(" {cell:>24}");
        }
        if !r.diagnostics.converged {
            line += "  [not converged]";
        }
        println!("{line}");
    }
}

fn emit_report(report: &Report<'_>, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => {
            print_table(&report.results);
            let mut o = Outputs::default();
            o.add(p, json + "\n");
            o.commit()
        }
        None => {
            print_table(&report.results);
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let d = load(&a.data)?;
    let cfg = a.solver.config();
    let names = coefficient_names(&d);
    let mut results = Vec::new();
    for q in quantiles(&a.qs)? {
        let f = fit(&d.dataset, q, &cfg).with_context(|| format!("fitting q = {q}"))?;
        results.push(q_result(q, &names, &f, None));
    }
    let report = Report {
        command: "fit",
        seed: a.solver.seed,
        input: a.data.input.display().to_string(),
        config: &cfg,
        replicates: None,
        results,
    };
    emit_report(&report, a.out.as_deref())
}

fn fit_and_bootstrap(d: &NamedDataset, q: f64, cfg: &SolverConfig, b: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    let f = fit(&d.dataset, q, cfg).with_context(|| format!("fitting q = {q}"))?;
    let opts = BootstrapOptions::new(b, level, seed);
    bootstrap_around(&d.dataset, q, cfg, &opts, f).with_context(|| format!("bootstrapping q = {q}"))
}

fn cmd_bootstrap(a: &BootArgs) -> Result<()> {
    let d = load(&a.data)?;
    let cfg = a.solver.config();
    let names = coefficient_names(&d);
    let mut results = Vec::new();
    for q in quantiles(&a.qs)? {
        let r = fit_and_bootstrap(&d, q, &cfg, a.b, a.level, a.solver.seed)?;
        results.push(q_result(q, &names, &r.estimate, Some(&r)));
    }
    let report = Report {
        command: "bootstrap",
        seed: a.solver.seed,
        input: a.data.input.display().to_string(),
        config: &cfg,
        replicates: Some(a.b),
        results,
    };
    emit_report(&report, a.out.as_deref())
}

fn scenario(s: Scenario, n: usize, censoring: f64, seed: u64) -> ScenarioConfig {
    match s {
        Scenario::Fixed => ScenarioConfig::fixed(n, censoring, seed),
        Scenario::Random => ScenarioConfig::random(n, censoring, seed),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let sc = scenario(a.scenario, a.n, a.censoring, a.seed);
    let sim = sim::generate(&sc)?;
    let header = format!(
        "qrtd simulate seed={} scenario={} n={} censoring={} rate={}",
        a.seed,
        sc.changepoints.label(),
        a.n,
        a.censoring,
        sim.censoring_rate
    );
    let rows = io::dataset_rows(&sim.dataset, None);
    let mut buf = Vec::new();
    io::write_rows(&mut buf, &rows, &["x1".into(), "x2".into()], Some(&header))?;
    let truth_path = a.truth.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".truth.csv");
        PathBuf::from(p)
    });
    let mut o = Outputs::default();
    o.add(&a.out, buf);
    o.add(&truth_path, format!("# {header}\n{}", io::truth_csv(&sim.truth)?));
    o.commit()?;
    println!("wrote {} subjects ({} censored) to {}", sim.dataset.len(), sim.dataset.len() - sim.dataset.n_events(), a.out.display());
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> Result<()> {
    let mut scenarios = Vec::new();
    for &c in &a.censoring {
        for &n in &a.n {
            scenarios.push(scenario(a.scenario, n, c, a.seed));
        }
    }
    let solver = SolverConfig { smoothing_a: a.a, ..SolverConfig::simulation() };
    let cfg = StudyConfig { scenarios, trials: a.trials, replicates: a.b, level: a.level, solver, seed: a.seed };
    let report = sim::run_study(&cfg)?;
    let header = format!("# qrtd study seed={} trials={} B={} level={} a={}\n", a.seed, a.trials, a.b, a.level, a.a);
    let table = io::study_csv(&report);
    if report.failed > 0 {
        eprintln!("{} trials failed and were left out", report.failed);
    }
    match &a.out {
        Some(p) => {
            let mut o = Outputs::default();
            o.add(p, header + &table);
            o.commit()?;
            print!("{table}");
        }
        None => print!("{header}{table}"),
    }
    Ok(())
}

fn cmd_km(a: &KmArgs) -> Result<()> {
    let d = load(&a.data)?;
    let curve = fit_censor_km(&d.dataset, None)?;
    let text = format!("# qrtd km input={}\n{}", a.data.input.display(), io::censor_curve_csv(&curve));
    match &a.out {
        Some(p) => {
            let mut o = Outputs::default();
            o.add(p, text);
            o.commit()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_curves(a: &CurvesArgs) -> Result<()> {
    let d = load(&a.data)?;
    let cfg = a.solver.config();
    let names = coefficient_names(&d);
    let grid = parse_grid(&a.q_grid)?;
    let mut per_coef: Vec<Vec<CurvePoint>> = vec![Vec::new(); names.len()];
    for &q in &grid {
        if !(q > 0.0 && q < 1.0) {
            bail!("quantiles must lie in (0, 1), got {q}");
        }
        let r = fit_and_bootstrap(&d, q, &cfg, a.b, a.level, a.solver.seed)?;
        if !r.estimate.converged {
            log::warn!("q = {q}: solver did not reach the tolerance");
        }
        for (k, pts) in per_coef.iter_mut().enumerate() {
            pts.push(CurvePoint { q, estimate: r.estimate.beta()[k], lower: r.ci_lower[k], upper: r.ci_upper[k] });
        }
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let header = format!(
        "# qrtd curves seed={} B={} level={} a={} input={}\n",
        a.solver.seed,
        a.b,
        a.level,
        cfg.smoothing_a,
        a.data.input.display()
    );
    let mut o = Outputs::default();
    for (name, pts) in names.iter().zip(&per_coef) {
        let stem = file_stem(name);
        o.add(&a.out_dir.join(format!("{stem}.csv")), header.clone() + &io::curve_csv(pts));
        o.add(&a.out_dir.join(format!("{stem}.svg")), io::curve_svg(name, pts));
    }
    o.commit()?;
    println!("wrote {} curves to {}", names.len(), a.out_dir.display());
    Ok(())
}

fn cmd_stanford(a: &StanfordArgs) -> Result<()> {
    let file = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let records = io::read_stanford_raw(file)?;
    let rows = io::stanford_covariates(&records)?;
    let names: Vec<String> = io::STANFORD_COVARIATES.iter().map(|s| s.to_string()).collect();
    let mut buf = Vec::new();
    io::write_rows(&mut buf, &rows, &names, Some(&format!("qrtd stanford input={}", a.input.display())))?;
    let mut o = Outputs::default();
    o.add(&a.out, buf);
    o.commit()?;
    let died = records.iter().filter(|r| r.died).count();
    println!("wrote {} patients ({} censored) to {}", records.len(), records.len() - died, a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QRTD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("QRTD_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("QRTD_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Study(a) => cmd_study(a),
        Command::Km(a) => cmd_km(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Stanford(a) => cmd_stanford(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
