mod groups;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqrerand::budget::{allocate, default_floor, threshold, BudgetPlan, DEFAULT_CAP_MULTIPLIER};
use seqrerand::datagen::{
    ingest_csv, surrogate_ucec_table, CovariateDistribution, CovariateTable, IngestionSchema,
};
use seqrerand::engine::PreparedDataset;
use seqrerand::harness::{
    emit_report, experiment_comparison, experiment_designs, experiment_ideal_sweep,
    experiment_simulated, replicate_rng, report_csv, Design, ExperimentConfig, ExperimentKind,
    MonteCarloReport, ReportFormat,
};
use seqrerand::linalg::CovarianceMode;
use seqrerand::Error;

use groups::{parse_list, DesignArg, GroupSpec};

/// Stream reserved for data ingestion and surrogate generation.
const DATA_CELL: u64 = (1 << 24) - 1;

#[derive(Parser, Debug)]
#[command(
    name = "seqrerand",
    version,
    about = "Sequential rerandomization: budget allocation, single trials and Monte Carlo experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Master seed (unsigned 64-bit). Required by every stochastic subcommand; there is no clock-based default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo replicates per cell, at least 100 [default: 100000 for simulate-ideal, 20000 for the other experiments]
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads for Monte Carlo replicates; 0 means one per core. Results do not depend on it.
    #[arg(long, global = true, env = "SEQRERAND_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Output file. Experiments also write `<stem>.plot.csv` beside it. Without it, results go to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format for --out (and for stdout when --out is absent)
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Suppress the human-readable summary on stdout
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Homogeneous,
    Heterogeneous,
}

impl From<Mode> for CovarianceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Homogeneous => CovarianceMode::Homogeneous,
            Mode::Heterogeneous => CovarianceMode::Heterogeneous,
        }
    }
}

/// Comma-separated values.
#[derive(Clone, Debug)]
struct List<T>(Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_list(s).map(List)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a total budget of rerandomization attempts across groups and print the first threshold
    Allocate(AllocateArgs),
    /// Assign one covariate file group by group, printing each accepted assignment
    RunTrial(RunTrialArgs),
    /// Analytic E(M) against simulated E(M_K) for ideal (normal, known covariance) data
    SimulateIdeal(IdealArgs),
    /// Complete and sequential rerandomization on freshly simulated i.i.d. covariates
    SimulateCovariates(SimulatedArgs),
    /// Enrollment designs on a fixed covariate set with arrival order reshuffled each replicate
    RunDesigns(DesignsArgs),
    /// Pairwise biased-coin baseline for several coin biases q
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct BudgetArgs {
    /// Lower bound on each group's budget [default: 10 if S >= 2000, else S/(2K) clamped to 1..=10]
    #[arg(long)]
    floor: Option<u64>,
    /// Explicit per-group budgets (comma list) replacing the allocation rule
    #[arg(long)]
    plan: Option<List<u64>>,
}

#[derive(Args, Debug)]
struct AllocateArgs {
    /// Total number of attempts S across all groups
    #[arg(long = "S", value_name = "S")]
    total: u64,
    /// Number of covariates
    #[arg(long)]
    p: u32,
    /// Groups: `KxEqual` (also `K x equal`) or a comma list of units per group
    #[arg(long, num_args = 1..=2, required = true, value_name = "GROUPS")]
    groups: Vec<String>,
    /// Lower bound on each group's budget [default: 10 if S >= 2000, else S/(2K) clamped to 1..=10]
    #[arg(long)]
    floor: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Covariate CSV with a header row
    #[arg(long, requires = "schema", conflicts_with = "surrogate")]
    data: Option<PathBuf>,
    /// JSON schema describing the columns of --data
    #[arg(long, requires = "data")]
    schema: Option<PathBuf>,
    /// Use the built-in synthetic 548-unit, 12-covariate dataset drawn from --seed
    #[arg(long)]
    surrogate: bool,
}

#[derive(Args, Debug)]
struct RunTrialArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Groups: `KxEqual` (split into pairs, extra pairs to earlier groups) or a comma list of units per group
    #[arg(long, num_args = 1..=2, required = true, value_name = "GROUPS")]
    groups: Vec<String>,
    /// Total number of attempts S across all groups
    #[arg(long = "S", value_name = "S")]
    total: u64,
    #[command(flatten)]
    budget: BudgetArgs,
    /// How each prefix's distance is standardized
    #[arg(long, value_enum, default_value_t = Mode::Homogeneous)]
    mode: Mode,
    /// Treated fraction in every group
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    /// Attempts per group are capped at this multiple of the group's budget
    #[arg(long, default_value_t = DEFAULT_CAP_MULTIPLIER)]
    cap_multiplier: u64,
}

#[derive(Args, Debug)]
struct IdealArgs {
    /// Experiment config (JSON); replaces the cell flags below
    #[arg(long, conflicts_with_all = ["p", "k", "s"])]
    config: Option<PathBuf>,
    /// Covariate dimensions (comma list)
    #[arg(long)]
    p: Option<List<u32>>,
    /// Numbers of equal groups (comma list)
    #[arg(long = "K", id = "k", value_name = "K")]
    k: Option<List<usize>>,
    /// Total budgets, strictly increasing (comma list)
    #[arg(long = "S", id = "s", value_name = "S")]
    s: Option<List<u64>>,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args, Debug)]
struct SimulatedArgs {
    /// Experiment config (JSON); replaces the cell flags below
    #[arg(long, conflicts_with_all = ["p", "k", "s", "units_per_group"])]
    config: Option<PathBuf>,
    /// Number of covariates
    #[arg(long)]
    p: Option<u32>,
    /// Number of equal groups
    #[arg(long = "K", id = "k", value_name = "K")]
    k: Option<usize>,
    /// Total number of attempts S
    #[arg(long = "S", id = "s", value_name = "S")]
    s: Option<u64>,
    /// Units per group, 2n_k (comma list)
    #[arg(long)]
    units_per_group: Option<List<usize>>,
    /// Covariate distributions (comma list of std-normal, exponential, chi-squared1, weibull, log-normal)
    #[arg(long, default_value = "std-normal,exponential,chi-squared1,weibull,log-normal")]
    distributions: List<CovariateDistribution>,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Attempts per group are capped at this multiple of the group's budget
    #[arg(long, default_value_t = DEFAULT_CAP_MULTIPLIER)]
    cap_multiplier: u64,
    /// Average only trials in which no group fell back to its best attempt
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct DesignsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Experiment config (JSON); replaces --design, --S and the budget flags
    #[arg(long, conflicts_with_all = ["design", "s"])]
    config: Option<PathBuf>,
    /// Design as `LABEL=GROUPS[@PLAN]`, e.g. `ii=3xequal` or `iii=220,220,108@94,472,1434`; repeatable
    #[arg(long)]
    design: Vec<DesignArg>,
    /// Total number of attempts S per trial
    #[arg(long = "S", id = "s", value_name = "S")]
    s: Option<u64>,
    /// Lower bound on each group's budget [default: 10 if S >= 2000, else S/(2K) clamped to 1..=10]
    #[arg(long)]
    floor: Option<u64>,
    /// Attempts per group are capped at this multiple of the group's budget
    #[arg(long, default_value_t = DEFAULT_CAP_MULTIPLIER)]
    cap_multiplier: u64,
    /// Average only trials in which no group fell back to its best attempt
    #[arg(long)]
    strict: bool,
    /// Replicates for the ideal-chain analogue of each design [default: --replicates]
    #[arg(long)]
    ideal_replicates: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Experiment config (JSON); replaces --q
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probabilities of taking the better assignment of each pair, in [0.5, 1] (comma list)
    #[arg(long, default_value = "0.5,0.75,1")]
    q: List<f64>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    /// Library error, naming the offending column when the covariance is singular.
    fn data(e: Error, names: Option<&[String]>) -> Self {
        let code = match e {
            Error::Underflow { .. } => 3,
            _ => 2,
        };
        let message = match (&e, names) {
            (Error::RankDeficient { index, .. }, Some(names)) if *index < names.len() => format!(
                "{e}: column '{}' is constant or a linear combination of earlier columns",
                names[*index]
            ),
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::data(e, None)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Allocate(a) => cmd_allocate(a, g),
        Command::RunTrial(a) => cmd_run_trial(a, g),
        Command::SimulateIdeal(a) => cmd_simulate_ideal(a, g),
        Command::SimulateCovariates(a) => cmd_simulate_covariates(a, g),
        Command::RunDesigns(a) => cmd_run_designs(a, g),
        Command::Compare(a) => cmd_compare(a, g),
    }
}

fn require_seed(g: &GlobalArgs) -> Result<u64, CliError> {
    g.seed
        .ok_or_else(|| CliError::usage("--seed is required for this subcommand"))
}

fn parse_groups(tokens: &[String]) -> Result<GroupSpec, CliError> {
    tokens.join(" ").parse().map_err(CliError::usage)
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn cmd_allocate(a: &AllocateArgs, g: &GlobalArgs) -> Result<(), CliError> {
    let groups = parse_groups(&a.groups)?;
    let sizes = groups.relative_sizes();
    let floor = a.floor.unwrap_or_else(|| default_floor(a.total, sizes.len()));
    let plan = allocate(a.total, a.p, &sizes, floor)?;
    let a1 = threshold(a.p, &sizes, 0, 0.0, plan.per_group[0])?;
    let joined = plan
        .per_group
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let text = match g.format {
        Format::Csv => format!("{joined}\na_1,{a1}\n"),
        Format::Json => format!(
            "{}\n",
            serde_json::json!({ "plan": plan.per_group, "floor": plan.floor, "a_1": a1 })
        ),
    };
    if let Some(out) = &g.out {
        write_output(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn load_table(data: &DataArgs, seed: u64) -> Result<CovariateTable, CliError> {
    let mut rng = replicate_rng(seed, DATA_CELL, 0);
    if data.surrogate {
        return Ok(surrogate_ucec_table(&mut rng));
    }
    match (&data.data, &data.schema) {
        (Some(path), Some(schema)) => {
            let schema = IngestionSchema::from_path(schema)?;
            Ok(ingest_csv(path, &schema, &mut rng)?)
        }
        _ => Err(CliError::usage("either --data with --schema, or --surrogate, is required")),
    }
}

fn plan_for(
    budget: &BudgetArgs,
    total: u64,
    p: u32,
    sizes: &[f64],
    cap_multiplier: u64,
) -> Result<BudgetPlan, CliError> {
    let plan = match &budget.plan {
        Some(List(s)) => {
            if s.len() != sizes.len() {
                return Err(CliError::usage(format!(
                    "--plan has {} entries for {} groups",
                    s.len(),
                    sizes.len()
                )));
            }
            BudgetPlan::explicit(s.clone(), cap_multiplier)?
        }
        None => {
            let floor = budget.floor.unwrap_or_else(|| default_floor(total, sizes.len()));
            allocate(total, p, sizes, floor)?
        }
    };
    Ok(plan.with_cap_multiplier(cap_multiplier))
}

fn cmd_run_trial(a: &RunTrialArgs, g: &GlobalArgs) -> Result<(), CliError> {
    let seed = require_seed(g)?;
    let groups = parse_groups(&a.groups)?;
    let table = load_table(&a.data, seed)?;
    let names = table.names.clone();
    let named = |e: Error| CliError::data(e, Some(&names));
    let units = groups.units(table.matrix.units()).map_err(CliError::usage)?;
    let p = table.matrix.p() as u32;
    let sizes: Vec<f64> = units.iter().map(|&u| u as f64 / 2.0).collect();
    let plan = plan_for(&a.budget, a.total, p, &sizes, a.cap_multiplier)?;
    let dataset = table
        .into_dataset(units.clone(), a.omega, a.mode.into())
        .map_err(named)?;
    let prepared = PreparedDataset::new(&dataset).map_err(named)?;

    let mut rng = replicate_rng(seed, 0, 0);
    let mut state = prepared.start();
    let mut csv = String::from("group,units,budget,threshold,m,attempts,fallback,assignment\n");
    if !g.quiet {
        println!("plan {}", plan.per_group.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    }
    while !state.is_done(dataset.groups()) {
        let step = prepared.step(&mut state, &plan, &mut rng).map_err(named)?;
        let k = step.group;
        let bits = step.assignment.to_bit_string();
        if !g.quiet {
            println!(
                "group {}: M={} threshold={} attempts={}{} assignment={bits}",
                k + 1,
                step.m,
                step.threshold,
                step.attempts,
                if step.fallback { " fallback" } else { "" },
            );
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{bits}",
            k + 1,
            units[k],
            plan.per_group[k],
            step.threshold,
            step.m,
            step.attempts,
            step.fallback
        );
    }
    let outcome = state.finish();
    if !g.quiet {
        println!("final M={}", outcome.final_m);
    }
    if let Some(out) = &g.out {
        let text = match g.format {
            Format::Csv => csv,
            Format::Json => format!(
                "{}\n",
                serde_json::to_string_pretty(&serde_json::json!({
                    "seed": seed,
                    "columns": names,
                    "group_units": units,
                    "plan": plan.per_group,
                    "outcome": outcome,
                }))
                .expect("trial serializes")
            ),
        };
        write_output(out, &text)?;
    }
    Ok(())
}

/// Config from a file, or from flags via `fill`; global flags override either.
fn build_config(
    kind: ExperimentKind,
    path: Option<&PathBuf>,
    g: &GlobalArgs,
    default_replicates: usize,
    fill: impl FnOnce(&mut ExperimentConfig) -> Result<(), CliError>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError {
                code: 2,
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            let config: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| CliError { code: 2, message: format!("invalid config: {e}") })?;
            if config.kind != kind {
                return Err(CliError {
                    code: 2,
                    message: format!("config is for {:?}, not {kind:?}", config.kind),
                });
            }
            config
        }
        None => {
            let mut config = ExperimentConfig::new(kind, default_replicates, require_seed(g)?);
            fill(&mut config)?;
            config
        }
    };
    if let Some(seed) = g.seed {
        config.master_seed = seed;
    }
    if let Some(r) = g.replicates {
        config.replicates = r;
    }
    config.workers = g.workers;
    config.validate()?;
    Ok(config)
}

fn missing(flag: &str) -> CliError {
    CliError::usage(format!("{flag} is required unless --config is given"))
}

fn output_report(report: &MonteCarloReport, g: &GlobalArgs) -> Result<(), CliError> {
    match &g.out {
        Some(path) => {
            emit_report(report, g.format.into(), path)?;
            if !g.quiet {
                print_summary(report);
            }
        }
        None => match g.format {
            Format::Csv => print!("{}", String::from_utf8_lossy(&report_csv(report)?)),
            Format::Json => println!(
                "{}",
                serde_json::to_string_pretty(report).expect("report serializes")
            ),
        },
    }
    Ok(())
}

fn print_summary(report: &MonteCarloReport) {
    let p = &report.provenance;
    println!("config {} seed {} replicates {}", p.config_hash, p.master_seed, p.replicates);
    for r in &report.rows {
        println!(
            "{}: E(M)={:.6} E(M_K)={:.6} (SE {:.2e}) ratio={:.4} fallback={:.4}",
            r.label, r.e_m, r.e_mk, r.se_mk, r.ratio, r.fallback_rate
        );
    }
}

fn cmd_simulate_ideal(a: &IdealArgs, g: &GlobalArgs) -> Result<(), CliError> {
    let config = build_config(ExperimentKind::IdealSweep, a.config.as_ref(), g, 100_000, |c| {
        c.p = a.p.clone().ok_or_else(|| missing("--p"))?.0;
        c.k = a.k.clone().ok_or_else(|| missing("--K"))?.0;
        c.s_grid = a.s.clone().ok_or_else(|| missing("--S"))?.0;
        c.plan = a.budget.plan.clone().map(|l| l.0);
        c.floor = a.budget.floor;
        Ok(())
    })?;
    output_report(&experiment_ideal_sweep(&config)?, g)
}

fn cmd_simulate_covariates(a: &SimulatedArgs, g: &GlobalArgs) -> Result<(), CliError> {
    let config = build_config(ExperimentKind::SimulatedCovariates, a.config.as_ref(), g, 20_000, |c| {
        c.p = vec![a.p.ok_or_else(|| missing("--p"))?];
        c.k = vec![a.k.ok_or_else(|| missing("--K"))?];
        c.s_grid = vec![a.s.ok_or_else(|| missing("--S"))?];
        c.units_per_group = a.units_per_group.clone().ok_or_else(|| missing("--units-per-group"))?.0;
        c.distributions = a.distributions.0.clone();
        c.plan = a.budget.plan.clone().map(|l| l.0);
        c.floor = a.budget.floor;
        c.cap_multiplier = a.cap_multiplier;
        c.strict = a.strict;
        Ok(())
    })?;
    output_report(&experiment_simulated(&config)?, g)
}

fn cmd_run_designs(a: &DesignsArgs, g: &GlobalArgs) -> Result<(), CliError> {
    // the data must be known before equal-split designs can be resolved
    let seed = match (&a.config, g.seed) {
        (_, Some(seed)) => seed,
        (Some(path), None) => peek_seed(path)?,
        (None, None) => return Err(CliError::usage("--seed is required for this subcommand")),
    };
    let table = load_table(&a.data, seed)?;
    let names = table.names.clone();
    let total_units = table.matrix.units();
    let config = build_config(ExperimentKind::DatasetDesigns, a.config.as_ref(), g, 20_000, |c| {
        if a.design.is_empty() {
            return Err(missing("--design"));
        }
        c.s_grid = vec![a.s.ok_or_else(|| missing("--S"))?];
        for d in &a.design {
            c.designs.push(Design {
                label: d.label.clone(),
                group_units: d.groups.units(total_units).map_err(CliError::usage)?,
                plan: d.plan.clone(),
            });
        }
        c.floor = a.floor;
        c.cap_multiplier = a.cap_multiplier;
        c.strict = a.strict;
        c.ideal_replicates = a.ideal_replicates;
        Ok(())
    })?;
    let report = experiment_designs(&table.matrix, &config).map_err(|e| CliError::data(e, Some(&names)))?;
    output_report(&report, g)
}

fn cmd_compare(a: &CompareArgs, g: &GlobalArgs) -> Result<(), CliError> {
    let seed = match (&a.config, g.seed) {
        (_, Some(seed)) => seed,
        (Some(path), None) => peek_seed(path)?,
        (None, None) => return Err(CliError::usage("--seed is required for this subcommand")),
    };
    let table = load_table(&a.data, seed)?;
    let names = table.names.clone();
    let config = build_config(ExperimentKind::MethodComparison, a.config.as_ref(), g, 20_000, |c| {
        c.q_values = a.q.0.clone();
        Ok(())
    })?;
    let report =
        experiment_comparison(&table.matrix, &config).map_err(|e| CliError::data(e, Some(&names)))?;
    output_report(&report, g)
}

fn peek_seed(path: &Path) -> Result<u64, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: 2,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError { code: 2, message: format!("invalid config: {e}") })?;
    Ok(config.master_seed)
}
