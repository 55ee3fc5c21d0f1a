// SPDX-License-Identifier: Apache-2.0

//! `appmon`: generate workloads, replay them through a simulated switch,
//! sniff, collect and report.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Network-based application monitoring toolkit.
#[derive(Debug, Parser)]
#[command(name = "appmon", version, about)]
pub struct Cli {
    /// TOML file with defaults (window_ms, idle_timeout_ms, ports, top_n,
    /// buffer_capacity, seed); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic HTTP workload capture and its ground-truth log.
    Gen(GenArgs),
    /// Replay a capture through a flow table and write one capture per port.
    SwitchSim(SwitchArgs),
    /// Extract HTTP records from a capture, analysing locally or forwarding.
    Sniff(SniffArgs),
    /// Ingest mirrored frames, tunneled frames or records and report metrics.
    Collect(CollectArgs),
    /// Render a JSON report as text, CSV or plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Workload spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SwitchArgs {
    #[arg(long)]
    pub rules: PathBuf,
    #[arg(long)]
    pub pcap_in: PathBuf,
    /// Directory receiving `port-<n>.pcap` files and `summary.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SniffMode {
    Onsite,
    Forward,
}

#[derive(Debug, Args)]
pub struct SniffArgs {
    #[arg(long)]
    pub pcap_in: PathBuf,
    /// Watched server ports, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ports: Option<Vec<u16>>,
    #[arg(long, value_enum, default_value_t = SniffMode::Onsite)]
    pub mode: SniffMode,
    /// Collector address for forward mode (one UDP datagram per record).
    #[arg(long)]
    pub forward: Option<SocketAddr>,
    /// Also write forwarded records to a length-prefixed record file.
    #[arg(long)]
    pub records_out: Option<PathBuf>,
    #[arg(long)]
    pub buffer: Option<usize>,
    /// Run the listener on its own thread (packets may be dropped).
    #[arg(long)]
    pub threaded: bool,
    #[arg(long)]
    pub window_ms: Option<u64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Onsite report (`.json` or `.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub records_listen: Vec<SocketAddr>,
    #[arg(long)]
    pub mirror_listen: Vec<SocketAddr>,
    #[arg(long)]
    pub tunnel_listen: Vec<SocketAddr>,
    /// Capture of mirrored or tunneled frames; tunnels are detected per frame.
    #[arg(long)]
    pub pcap_in: Vec<PathBuf>,
    /// Record file written by `sniff --records-out`.
    #[arg(long)]
    pub records_in: Vec<PathBuf>,
    #[arg(long)]
    pub window_ms: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub ports: Option<Vec<u16>>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Report file (`.json` or `.csv`); text goes to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write every received frame to this capture.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Only dump; skip analysis.
    #[arg(long, requires = "dump")]
    pub dump_only: bool,
    /// Socket mode: stop after this long (default: until Ctrl-C).
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report written by `collect` or `sniff`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Whitespace-separated per-window columns for gnuplot and friends.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
