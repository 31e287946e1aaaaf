use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use ptw_core::chaser::{fit, CovarianceForm, FitConfig, PhiSign, PowerMode};
use ptw_core::numcore::RngStream;
use ptw_core::ptwdist::{
    dispersion_index, ptw_loglik, ptw_sample, zero_inflation_index, PmfConfig, PmfEvaluator, PtwParams,
};
use ptw_core::refdists::RefFamily;
use ptw_core::simstudy::{full_scenarios, run_study, scenario_catalog, standardized_bias_table, StudyScale};
use thiserror::Error;

use crate::data::{self, load_csv, SchemaHints};
use crate::design::{build_design, parse_terms, ModelSpecConfig, OffsetSpec};
use crate::report::FitReport;

/// Failure classes, mapped onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ptw", version, about = "Poisson-Tweedie regression for count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a Poisson-Tweedie regression by estimating functions
    Fit(FitArgs),
    /// Draw random counts
    Simulate(SimulateArgs),
    /// Probability mass function with Monte Carlo standard errors
    Pmf(PmfArgs),
    /// Dispersion, zero-inflation and heavy-tail indices
    Indices(IndicesArgs),
    /// Replicated simulation study
    Simstudy(StudyArgs),
    /// Embedded datasets
    Datasets {
        #[command(subcommand)]
        action: DatasetAction,
    },
}

#[derive(Debug, Args)]
struct FitArgs {
    /// CSV file with a header row
    #[arg(long, conflicts_with = "dataset")]
    data: Option<PathBuf>,
    /// Embedded dataset name
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "y")]
    response: String,
    /// Comma-separated terms, e.g. "dose,dose^2,group:x"
    #[arg(long, default_value = "")]
    terms: String,
    /// Offset column, added to the linear predictor
    #[arg(long)]
    offset: Option<String>,
    /// Take the log of the offset column first
    #[arg(long, requires = "offset")]
    log_offset: bool,
    /// Columns to treat as categorical
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Frequency column used to expand rows; a column named "count" that is
    /// not otherwise used is picked up automatically
    #[arg(long)]
    count_column: Option<String>,
    /// "free" or a fixed power value
    #[arg(long, default_value = "free")]
    power: String,
    #[arg(long, value_enum, default_value_t = PhiSignArg::Any)]
    phi_sign: PhiSignArg,
    /// Hold the dispersion at this value
    #[arg(long, allow_hyphen_values = true)]
    fixed_phi: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = CovarianceArg::Decoupled)]
    covariance: CovarianceArg,
    /// Seed for the Monte Carlo log-likelihood
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    mc_draws: usize,
    /// Skip the log-likelihood
    #[arg(long)]
    no_loglik: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhiSignArg {
    Any,
    Nonnegative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Decoupled,
    Joint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Ptw,
    Cmp,
    Gc,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Family::Ptw)]
    family: Family,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    phi: f64,
    #[arg(long, default_value_t = 2.0)]
    power: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistArgs {
    #[arg(long)]
    mu: f64,
    #[arg(long, allow_hyphen_values = true)]
    phi: f64,
    #[arg(long)]
    power: f64,
    #[arg(long, default_value_t = 100_000)]
    mc_draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl DistArgs {
    fn params(&self) -> Result<PtwParams, CliError> {
        PtwParams::new(self.mu, self.phi, self.power).map_err(usage)
    }

    fn pmf_config(&self) -> PmfConfig {
        PmfConfig {
            mc_draws: self.mc_draws,
            seed: self.seed,
            ..PmfConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct PmfArgs {
    #[command(flatten)]
    dist: DistArgs,
    /// Counts to evaluate, comma separated (default 0..=y-max)
    #[arg(long, value_delimiter = ',')]
    y: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    y_max: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IndicesArgs {
    #[command(flatten)]
    dist: DistArgs,
    /// Counts at which to report the heavy-tail ratio
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10")]
    ht_y: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long, required_unless_present = "list")]
    scenario: Option<String>,
    /// List scenario names
    #[arg(long)]
    list: bool,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override the replicate count
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the sample sizes
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Emit the bias table standardized by the n = 100 standard errors
    #[arg(long)]
    standardized: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DatasetAction {
    /// Names of the embedded datasets
    List,
    /// Write an embedded dataset as CSV
    Export {
        name: String,
        /// One row per observation instead of frequency triples
        #[arg(long)]
        expanded: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn implicit_count_column(path: &std::path::Path, args: &FitArgs) -> Result<bool, CliError> {
    let file = std::fs::File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut header = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(file), &mut header).map_err(usage)?;
    let named = header.trim().split(',').any(|c| c.trim().trim_matches('"') == "count");
    let used = args.response == "count"
        || args.offset.as_deref() == Some("count")
        || args.categorical.iter().any(|c| c == "count")
        || parse_terms(&args.terms).map_err(usage)?.iter().any(|t| t.factors.iter().any(|f| f.column == "count"));
    Ok(named && !used)
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let mut hints = SchemaHints {
        categorical: args.categorical.clone(),
        count_column: args.count_column.clone(),
        responses: vec![args.response.clone()],
    };
    let table = match (&args.data, &args.dataset) {
        (Some(path), _) => {
            if hints.count_column.is_none() && implicit_count_column(path, args)? {
                hints.count_column = Some("count".into());
            }
            load_csv(path, &hints).map_err(usage)?
        }
        (None, Some(name)) => {
            let raw = data::embedded(name).ok_or_else(|| usage(format!("unknown dataset {name:?}")))?;
            hints.count_column.get_or_insert_with(|| "count".into());
            data::parse_csv(raw.to_csv().as_bytes(), &hints).map_err(usage)?
        }
        (None, None) => return Err(usage("one of --data or --dataset is required")),
    };
    let mut spec = ModelSpecConfig::new(&args.response, &args.terms).map_err(usage)?;
    spec.offset = args.offset.as_ref().map(|c| OffsetSpec {
        column: c.clone(),
        log: args.log_offset,
    });
    let design = build_design(&table, &spec).map_err(usage)?;
    let power_mode = match args.power.as_str() {
        "free" => PowerMode::Free,
        s => PowerMode::Fixed(s.parse().map_err(|_| usage(format!("--power must be \"free\" or a number, got {s:?}")))?),
    };
    let config = FitConfig {
        alpha: args.alpha,
        max_iter: args.max_iter,
        tol: args.tol,
        power_mode,
        phi_sign: match args.phi_sign {
            PhiSignArg::Any => PhiSign::Any,
            PhiSignArg::Nonnegative => PhiSign::NonNegative,
        },
        fixed_phi: args.fixed_phi,
        covariance_form: match args.covariance {
            CovarianceArg::Decoupled => CovarianceForm::Decoupled,
            CovarianceArg::Joint => CovarianceForm::Joint,
        },
        start: None,
    };
    let result = fit(&design.model, &config).map_err(|e| match e {
        ptw_core::chaser::FitError::InvalidConfig(_) | ptw_core::chaser::FitError::TooFewObservations { .. } => usage(e),
        other => numerical(other),
    })?;
    let loglik = if args.no_loglik {
        Err("not requested".to_string())
    } else {
        let mu = design.model.mean(&result.theta_hat.beta).map_err(numerical)?;
        let params: Result<Vec<PtwParams>, _> = mu
            .iter()
            .map(|&m| PtwParams::new(m, result.theta_hat.phi, result.theta_hat.p))
            .collect();
        let cfg = PmfConfig {
            mc_draws: args.mc_draws,
            seed: args.seed,
            ..PmfConfig::default()
        };
        params
            .and_then(|ps| ptw_loglik(&ps, design.model.y(), &cfg))
            .map_err(|e| e.to_string())
    };
    let report = FitReport::new(&design.column_names, design.model.n(), &result, &config, loglik);
    emit(args.out.as_ref(), &report.to_json())?;
    if !result.converged {
        return Err(numerical(format!(
            "fit did not converge in {} iterations; best iterate written",
            result.iterations
        )));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut rng = RngStream::new(args.seed, 0);
    let y = match args.family {
        Family::Ptw => {
            let mu = args.mu.ok_or_else(|| usage("--mu is required for --family ptw"))?;
            let params = PtwParams::new(mu, args.phi, args.power).map_err(usage)?;
            ptw_sample(&params, args.n, &mut rng).map_err(usage)?
        }
        Family::Cmp | Family::Gc => {
            let lambda = args.lambda.ok_or_else(|| usage("--lambda is required for --family cmp/gc"))?;
            let family = if matches!(args.family, Family::Cmp) { RefFamily::ComPoisson } else { RefFamily::GammaCount };
            family.sample(lambda, args.nu, args.n, &mut rng).map_err(usage)?
        }
    };
    let mut text = String::from("y\n");
    for v in y {
        writeln!(text, "{v}").expect("string write");
    }
    emit(args.out.as_ref(), &text)
}

fn cmd_pmf(args: &PmfArgs) -> Result<(), CliError> {
    let params = args.dist.params()?;
    let eval = PmfEvaluator::new(params, &args.dist.pmf_config()).map_err(usage)?;
    let ys: Vec<u64> = if args.y.is_empty() { (0..=args.y_max).collect() } else { args.y.clone() };
    let mut text = String::from("y,pmf,mc_stderr,method\n");
    for y in ys {
        let e = eval.pmf(y).map_err(numerical)?;
        writeln!(text, "{y},{},{},{}", e.value, e.mc_stderr, e.method.as_str()).expect("string write");
    }
    emit(args.out.as_ref(), &text)
}

fn cmd_indices(args: &IndicesArgs) -> Result<(), CliError> {
    let params = args.dist.params()?;
    let mut text = String::from("index,y,value,mc_stderr\n");
    writeln!(text, "DI,,{},0", dispersion_index(&params).map_err(usage)?).expect("string write");
    writeln!(text, "ZI,,{},0", zero_inflation_index(&params).map_err(usage)?).expect("string write");
    let eval = PmfEvaluator::new(params, &args.dist.pmf_config()).map_err(usage)?;
    for &y in &args.ht_y {
        let r = eval.heavy_tail(y).map_err(numerical)?;
        writeln!(text, "HT,{y},{},{}", r.value, r.mc_stderr).expect("string write");
    }
    emit(args.out.as_ref(), &text)
}

fn cmd_simstudy(args: &StudyArgs) -> Result<(), CliError> {
    if args.list {
        let mut names = full_scenarios();
        names.insert(0, "ptw-p1.5-di2".into());
        return emit(args.out.as_ref(), &(names.join("\n") + "\n"));
    }
    let name = args.scenario.as_deref().unwrap_or_default();
    let scale = match args.scale {
        Scale::Desk => StudyScale::Desk,
        Scale::Paper => StudyScale::Paper,
    };
    let mut scenario = scenario_catalog(name, scale, args.seed).map_err(usage)?;
    if let Some(r) = args.replicates {
        scenario.replicates = r;
    }
    if !args.sizes.is_empty() {
        scenario.sample_sizes = args.sizes.clone();
    }
    let result = run_study(&scenario, args.seed).map_err(|e| match e {
        ptw_core::simstudy::StudyError::InvalidScenario(_) => usage(e),
        other => numerical(other),
    })?;
    let text = match (args.format, args.standardized) {
        (Format::Json, false) => serde_json::to_string_pretty(&result).expect("serializable") + "\n",
        (Format::Json, true) => {
            serde_json::to_string_pretty(&standardized_bias_table(&result).map_err(usage)?).expect("serializable") + "\n"
        }
        (Format::Csv, false) => {
            let mut t = String::from("scenario,n,replicates,failures,parameter,truth,mean_estimate,mean_bias,mean_std_error,empirical_std_error,coverage\n");
            for row in &result.rows {
                for p in &row.parameters {
                    writeln!(
                        t,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        result.scenario,
                        row.n,
                        row.replicates,
                        row.failures,
                        p.parameter,
                        p.truth,
                        p.mean_estimate,
                        p.mean_bias,
                        p.mean_std_error,
                        p.empirical_std_error,
                        p.coverage
                    )
                    .expect("string write");
                }
            }
            t
        }
        (Format::Csv, true) => {
            let mut t = String::from("n,parameter,bias,lower,upper,std_error\n");
            for r in standardized_bias_table(&result).map_err(usage)? {
                writeln!(t, "{},{},{},{},{},{}", r.n, r.parameter, r.bias, r.lower, r.upper, r.std_error).expect("string write");
            }
            t
        }
    };
    emit(args.out.as_ref(), &text)
}

fn cmd_datasets(action: &DatasetAction) -> Result<(), CliError> {
    match action {
        DatasetAction::List => emit(None, &(data::EMBEDDED_DATASETS.join("\n") + "\n")),
        DatasetAction::Export { name, expanded, out } => {
            let table = data::embedded(name).ok_or_else(|| usage(format!("unknown dataset {name:?}")))?;
            let table = if *expanded { table.expand_frequencies("count").map_err(usage)? } else { table };
            emit(out.as_ref(), &table.to_csv())
        }
    }
}

/// Parse `argv` and run the selected command, returning the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Pmf(a) => cmd_pmf(a),
        Command::Indices(a) => cmd_indices(a),
        Command::Simstudy(a) => cmd_simstudy(a),
        Command::Datasets { action } => cmd_datasets(action),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
