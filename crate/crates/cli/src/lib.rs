//! Command-line front end for federated data valuation.

pub mod commands;
pub mod config;
pub mod report;

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedvalue_core::federation::{serve, ServerRole};
use fedvalue_core::psi::ServerBehavior;

pub use commands::{cmd_attack_sim, cmd_bench, cmd_valuate, AttackReport, BenchReport, BenchRow, SweepParam};
pub use config::{Format, MethodArg, ModeArg, RunConfig, TransportArg, Unit};
pub use report::ReportFile;

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Bad flags or an impossible configuration.
    pub const CONFIG: i32 = 2;
    /// Input that cannot be parsed, has duplicate ids or the wrong columns.
    pub const PARSE: i32 = 3;
    /// A server was caught misbehaving.
    pub const MISBEHAVIOR: i32 = 4;
    /// Too many parties for the chosen method.
    pub const SCALE: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fedvalue_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report error: {0}")]
    Report(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use fedvalue_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                E::Parse(_) | E::DuplicateId(_) | E::Schema(_) | E::Alignment(_) => exit::PARSE,
                E::Domain(_) | E::Partition(_) | E::Dimension(_) | E::Selection(_) => exit::CONFIG,
                E::Misbehavior { .. } => exit::MISBEHAVIOR,
                E::Scale { .. } => exit::SCALE,
                _ => exit::OTHER,
            },
            CliError::Io(_) | CliError::Report(_) => exit::OTHER,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fedvalue", version, about = "Task-specific data valuation for vertical federated learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value every data party against the task party.
    Valuate(RunArgs),
    /// Time valuations while sweeping one parameter.
    Bench(BenchArgs),
    /// Measure how often a misbehaving computation server is caught.
    AttackSim(AttackArgs),
    /// Run one PSI server over TCP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// CSV file with a header row; generated binary data when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    /// Column holding sample ids; row numbers are used otherwise.
    #[arg(long)]
    pub id_column: Option<String>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: u32,
    /// Principal components each party keeps before binning.
    #[arg(long = "pca", value_parser = clap::value_parser!(u64).range(1..))]
    pub pca: Option<u64>,
    /// Number of data parties besides the task party.
    #[arg(long = "parties", value_parser = clap::value_parser!(u64).range(1..))]
    pub parties: Option<u64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub features_per_party: u64,
    /// Rows of generated data when no input is given.
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value_t = MethodArg::Exact)]
    pub method: MethodArg,
    /// Permutations drawn by the sampled method.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Copies of every id submitted to the servers.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub q: u32,
    #[arg(long)]
    pub nr_min: Option<u32>,
    #[arg(long)]
    pub nr_max: Option<u32>,
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// Simulated computation-server behavior: honest, forge:N, drop:P, inject:N or report-zero.
    #[arg(long, default_value = "honest", value_parser = parse_behavior_arg)]
    pub server_behavior: ServerBehavior,
    /// Server addresses as COMPUTATION_ADDR,VALIDATION_ADDR.
    #[arg(long)]
    pub connect: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long, value_enum, default_value_t = Unit::Nats)]
    pub unit: Unit,
}

impl RunArgs {
    pub fn to_config(&self, default_mode: ModeArg) -> RunConfig {
        RunConfig {
            input: self.input.clone(),
            label: self.label.clone(),
            id_column: self.id_column.clone(),
            bins: self.bins,
            pca_components: self.pca.map(|v| v as usize),
            n_parties: self.parties.map(|v| v as usize),
            features_per_party: self.features_per_party as usize,
            n_samples: self.n_samples,
            seed: self.seed,
            mode: self.mode.unwrap_or(default_mode),
            method: self.method,
            samples: self.samples as usize,
            q: self.q,
            nr_min: self.nr_min,
            nr_max: self.nr_max,
            transport: self.transport,
            server_behavior: self.server_behavior,
            connect: self.connect.clone(),
            out: self.out.clone(),
            format: self.format,
            unit: self.unit,
            shared_key: None,
            group_key: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub sweep: SweepParam,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// honest, forge:N, drop:P, inject:N or report-zero.
    #[arg(long)]
    pub behavior: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Computation,
    Validation,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub role: RoleArg,
    #[arg(long)]
    pub listen: SocketAddr,
    /// Validation server address; required for the computation role.
    #[arg(long)]
    pub validation: Option<SocketAddr>,
    #[arg(long, default_value = "honest")]
    pub behavior: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_behavior_arg(text: &str) -> Result<ServerBehavior, String> {
    text.parse().map_err(|e: fedvalue_core::Error| e.to_string())
}

fn parse_behavior(text: &str) -> Result<ServerBehavior, CliError> {
    text.parse().map_err(|e: fedvalue_core::Error| CliError::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Valuate(args) => {
            let config = args.to_config(ModeArg::Centralized);
            let report = cmd_valuate(&config)?;
            report::emit(&report.render(config.format)?, config.out.as_deref())?;
            if config.out.is_some() {
                for p in &report.phi {
                    eprintln!("party {:>3}  phi = {}", p.party, p.phi);
                }
                eprintln!("total_cmi = {} ({:?})", report.total_cmi, report.unit);
            }
        }
        Command::Bench(args) => {
            let config = args.run.to_config(ModeArg::Federated);
            let bench = cmd_bench(&config, args.sweep, &args.values, args.reps)?;
            let text = match config.format {
                Format::Text => report::to_toml(&bench)?,
                Format::Jsonl => report::jsonl(&bench.rows)?,
            };
            report::emit(&text, config.out.as_deref())?;
        }
        Command::AttackSim(args) => {
            let config = args.run.to_config(ModeArg::Federated);
            let behavior = parse_behavior(&args.behavior)?;
            let attack = cmd_attack_sim(&config, behavior, args.trials)?;
            let text = match config.format {
                Format::Text => report::to_toml(&attack)?,
                Format::Jsonl => report::jsonl(&[attack])?,
            };
            report::emit(&text, config.out.as_deref())?;
        }
        Command::Serve(args) => {
            let behavior = parse_behavior(&args.behavior)?;
            let role = match args.role {
                RoleArg::Computation => ServerRole::Computation,
                RoleArg::Validation => ServerRole::Validation,
            };
            if role == ServerRole::Computation && args.validation.is_none() {
                return Err(CliError::Config("--validation is required for the computation role".into()));
            }
            let listener = TcpListener::bind(args.listen)?;
            eprintln!("{:?} server listening on {}", args.role, listener.local_addr()?);
            serve(listener, role, behavior, args.seed, args.validation)?;
        }
    }
    Ok(())
}
