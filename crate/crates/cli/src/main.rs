//! `ephemstore`: plan, deploy, benchmark and tear down an on-demand storage
//! deployment from one run directory.

mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ephemstore::bench::{Mode, DEFAULT_ITERATIONS, DEFAULT_MDTEST_ITEMS};
use ephemstore::executor::{Backend, Direction};

use run::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "ephemstore",
    version,
    about = "On-demand striped storage: plan, deploy, bench, report, teardown"
)]
pub struct Cli {
    /// Node inventory file (required by `plan`).
    #[arg(long, global = true)]
    pub inventory: Option<PathBuf>,
    /// Run directory holding the manifest, plan, handle and results.
    #[arg(long, global = true, default_value = "ephemstore-run")]
    pub out: PathBuf,
    /// local: daemons on this host; emit: configs and a launch manifest only.
    #[arg(long, global = true, default_value = "local", value_parser = parse_backend)]
    pub backend: Backend,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub cmd: Cmd,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse()
}

/// Byte sizes such as `4MiB`, `512MB`, `1k` or `1048576`. Decimal units
/// (`k`, `KB`, `M`, `MB`, ...) are powers of 1000, binary units (`KiB`,
/// `MiB`, ...) powers of 1024.
fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, unit) = t.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("invalid size `{s}`"))?;
    let unit = unit.trim().to_ascii_lowercase();
    let unit = unit.strip_suffix('b').unwrap_or(&unit);
    let (prefix, base) = match unit.strip_suffix('i') {
        Some(p) if !p.is_empty() => (p, 1024u64),
        _ => (unit, 1000u64),
    };
    let exp = match prefix {
        "" => 0,
        "k" => 1,
        "m" => 2,
        "g" => 3,
        "t" => 4,
        _ => return Err(format!("invalid size `{s}`: unknown unit")),
    };
    base.checked_pow(exp)
        .and_then(|m| n.checked_mul(m))
        .ok_or_else(|| format!("size `{s}` is too large"))
}


#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Allocate nodes from the inventory and lay out the services.
    Plan(PlanArgs),
    /// Launch the planned services.
    Deploy,
    /// Show service states of the current deployment.
    Status,
    /// Create client attach points on the compute nodes.
    Attach(AttachArgs),
    /// Copy data into or out of the deployed namespace.
    Stage(StageArgs),
    /// Run a benchmark workload.
    Bench(BenchCmd),
    /// Summarize all benchmark results of the run directory.
    Report,
    /// Stop everything and scrub the disks.
    Teardown,
    /// Serve one service config (used by the local backend).
    #[command(hide = true)]
    Daemon { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyPreset {
    Dom,
    Ault,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Number of storage nodes to allocate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub storage_nodes: u64,
    /// Number of compute nodes to allocate (default: every eligible node).
    #[arg(long)]
    pub compute_nodes: Option<usize>,
    /// Feature constraint for storage nodes (default: `storage`, or
    /// `local-storage` when the inventory has no storage feature).
    #[arg(long)]
    pub storage_constraint: Option<String>,
    #[arg(long, default_value = "compute")]
    pub compute_constraint: String,
    #[arg(long, value_enum, default_value = "dom")]
    pub policy: PolicyPreset,
    #[arg(long)]
    pub meta_disks: Option<usize>,
    #[arg(long)]
    pub storage_disks: Option<usize>,
    /// Put management and monitoring on this many dedicated disks instead
    /// of the first metadata disk.
    #[arg(long)]
    pub dedicated_mgmt_disks: Option<usize>,
    #[arg(long, value_parser = parse_bytes)]
    pub stripe_size: Option<u64>,
    #[arg(long)]
    pub base_port: Option<u16>,
    /// Keep file attributes in sidecar records instead of inline.
    #[arg(long)]
    pub no_xattr: bool,
}

#[derive(Args, Debug)]
pub struct AttachArgs {
    /// Compute node ids (default: all allocated compute nodes).
    #[arg(long, value_delimiter = ',')]
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageDirection {
    In,
    Out,
}

impl From<StageDirection> for Direction {
    fn from(d: StageDirection) -> Self {
        match d {
            StageDirection::In => Direction::In,
            StageDirection::Out => Direction::Out,
        }
    }
}

#[derive(Args, Debug)]
pub struct StageArgs {
    #[arg(value_enum)]
    pub direction: StageDirection,
    pub src: String,
    pub dst: String,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    #[command(subcommand)]
    pub workload: Workload,
}

#[derive(Subcommand, Debug)]
pub enum Workload {
    /// Bandwidth: shared file or file per process.
    Ior(IorArgs),
    /// Metadata operations per second.
    Mdtest(MdtestArgs),
    /// HACC-IO particle checkpoint to one shared file.
    Hacc(HaccArgs),
}

#[derive(Args, Debug)]
pub struct CommonBench {
    /// Run against a plain directory instead of the deployment.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Simulated compute nodes (default: allocated compute nodes, at least 1).
    #[arg(long)]
    pub nodes: Option<u32>,
    #[arg(long, default_value_t = 1)]
    pub ppn: u32,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: u32,
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    /// Read back with the same ranks that wrote.
    #[arg(long)]
    pub no_reorder: bool,
    /// Drive workers one after another instead of on the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Shared,
    Fpp,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Shared => Mode::SharedFile,
            ModeArg::Fpp => Mode::FilePerProcess,
        }
    }
}

#[derive(Args, Debug)]
pub struct IorArgs {
    #[command(flatten)]
    pub common: CommonBench,
    #[arg(long, value_enum, default_value = "shared")]
    pub mode: ModeArg,
    /// Bytes written by each process.
    #[arg(long, value_parser = parse_bytes, default_value = "4MiB")]
    pub size: u64,
    /// Bytes per I/O call (default: 1 MiB, or the size if smaller).
    #[arg(long, value_parser = parse_bytes)]
    pub transfer: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MdtestArgs {
    #[command(flatten)]
    pub common: CommonBench,
    /// Directories and files per process.
    #[arg(long, default_value_t = DEFAULT_MDTEST_ITEMS)]
    pub items: u64,
    /// Bytes written into and read from each file.
    #[arg(long, value_parser = parse_bytes, default_value = "0")]
    pub write_bytes: u64,
}

#[derive(Args, Debug)]
pub struct HaccArgs {
    #[command(flatten)]
    pub common: CommonBench,
    /// Particles per process.
    #[arg(long, default_value_t = 25_000)]
    pub particles: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
