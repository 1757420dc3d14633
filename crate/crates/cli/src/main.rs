use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fairtree::io::{self, IoError};
use fairtree::partition::{self, AuditConfig, Engine};
use fairtree::report::{self, PriorityReport, TreeReport};
use fairtree::simgen::{self, FaultRule, SimError};

#[derive(Parser)]
#[command(name = "fairtree", version, about = "Audit model predictions for subgroup performance disparities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit a predictions file.
    Audit(AuditArgs),
    /// Run a simulation study and print its table.
    Simulate(SimulateArgs),
    /// Write a copy of a predictions file with injected faults.
    Inject(InjectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Permutation,
    Fluctuation,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Permutation => Engine::Permutation,
            EngineArg::Fluctuation => Engine::Fluctuation,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Tree,
    Priority,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, value_enum, default_value = "fluctuation")]
    engine: EngineArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Minimum node size (default: 1 for permutation, 10 for fluctuation).
    #[arg(long)]
    min_node: Option<usize>,
    #[arg(long, default_value_t = 5)]
    max_depth: usize,
    #[arg(long, default_value_t = fairtree::perm::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, env = "FAIRTREE_SEED", default_value_t = 0)]
    seed: u64,
}

impl EngineArgs {
    fn config(&self) -> AuditConfig {
        let engine = Engine::from(self.engine);
        AuditConfig {
            engine,
            alpha: self.alpha,
            n_permutations: self.permutations,
            min_node: self.min_node.unwrap_or(engine.default_min_node()),
            max_depth: self.max_depth,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Graphviz output (tree mode only).
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tree")]
    mode: Mode,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = ["1.1", "1.2", "2", "3"])]
    study: String,
    /// Scenario letters for study 3, e.g. `A` or `A,C,E` (default: all).
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<char>,
    #[arg(long, value_enum, default_value = "fluctuation")]
    engine: EngineArg,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, default_value_t = fairtree::perm::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, env = "FAIRTREE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// JSON list of fault rules.
    #[arg(long)]
    rules: PathBuf,
    #[arg(long, env = "FAIRTREE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure that maps to exit code 1 (usage) or 2 (data).
enum Failure {
    Usage(String),
    Data(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidScenario(m) => Failure::Usage(m),
            SimError::Data(d) => Failure::Data(d.to_string()),
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn audit(args: &AuditArgs) -> Result<(), Failure> {
    let config = args.engine.config();
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    eprintln!(
        "fairtree audit: engine={} alpha={} min_node={} max_depth={} permutations={} seed={} mode={}",
        config.engine.as_str(),
        config.alpha,
        config.min_node,
        config.max_depth,
        config.n_permutations,
        config.seed,
        if args.mode == Mode::Tree { "tree" } else { "priority" }
    );
    let data = io::load_csv(&args.data, &args.schema)?;
    eprintln!("fairtree audit: {} rows, {} covariates", data.n(), data.covariates().len());
    let fail = |e: fairtree::TestError| Failure::Data(e.to_string());
    match args.mode {
        Mode::Tree => {
            let tree = partition::grow_tree(&data, &config).map_err(fail)?;
            let rep = TreeReport::from_tree(&tree);
            write_output(args.out.as_deref(), &rep.to_json())?;
            if let Some(dot) = &args.dot {
                write_output(Some(dot), &report::export_dot(&rep))?;
            }
        }
        Mode::Priority => {
            if args.dot.is_some() {
                return Err(Failure::Usage("--dot is only available with --mode tree".into()));
            }
            let entries = partition::priority_audit(&data, &config).map_err(fail)?;
            let rep = PriorityReport::new(&entries, &config, data.n());
            write_output(args.out.as_deref(), &rep.to_json())?;
        }
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut config = AuditConfig::new(args.engine.into());
    config.n_permutations = args.permutations;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if !args.scenario.is_empty() && args.study != "3" {
        return Err(Failure::Usage("--scenario applies to study 3 only".into()));
    }
    let replicates = args.replicates.unwrap_or(if args.study == "3" { 200 } else { 1000 });
    if replicates == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    eprintln!(
        "fairtree simulate: study={} engine={} replicates={} permutations={} seed={}",
        args.study,
        config.engine.as_str(),
        replicates,
        config.n_permutations,
        args.seed
    );
    let result = match args.study.as_str() {
        "1.1" => simgen::run_study_1(&config, &simgen::STUDY1_SIZES, &simgen::STUDY1_EFFECTS, replicates, args.seed)?,
        "1.2" => simgen::run_study_1_2(&config, &simgen::STUDY12_MINORITY, 500, 0.25, replicates, args.seed)?,
        "2" => simgen::run_study_2(&config, &simgen::STUDY2_EFFECTS, 500, replicates, args.seed)?,
        _ => {
            let labels: Vec<char> = if args.scenario.is_empty() {
                ('A'..='G').collect()
            } else {
                args.scenario.clone()
            };
            simgen::run_study_3(&config, &labels, replicates, args.seed)?
        }
    };
    write_output(args.out.as_deref(), &result.to_table())
}

fn inject(args: &InjectArgs) -> Result<(), Failure> {
    eprintln!("fairtree inject: seed={}", args.seed);
    let schema = io::load_schema(&args.schema)?;
    let text = std::fs::read_to_string(&args.data).map_err(|e| Failure::Data(format!("{}: {e}", args.data.display())))?;
    let rules_text =
        std::fs::read_to_string(&args.rules).map_err(|e| Failure::Data(format!("{}: {e}", args.rules.display())))?;
    let rules: Vec<FaultRule> =
        serde_json::from_str(&rules_text).map_err(|e| Failure::Data(format!("{}: {e}", args.rules.display())))?;
    let data = io::parse_csv(&text, &schema)?;
    let faulty = simgen::inject_faults(&data, &rules, args.seed).map_err(|e| Failure::Data(e.to_string()))?;
    let out = io::replace_predictions(&text, &schema, faulty.y_pred())?;
    write_output(Some(&args.out), &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Audit(a) => audit(a),
        Command::Simulate(s) => simulate(s),
        Command::Inject(i) => inject(i),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
