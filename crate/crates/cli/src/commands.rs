// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use anyhow::{anyhow, Context};
use appmon::analysis::report::{plot_data, read_json, render_text, write_csv, write_report_file, Report, DEFAULT_TOP_N};
use appmon::analysis::{AnalysisEngine, EngineConfig};
use appmon::collector::{run_collector, CollectorConfig, CollectorError, FileInput, IngestKind, SocketCollector};
use appmon::flow_rules::parse_rules;
use appmon::packet::pcap::{read_file, write_file, PcapError, PcapReader};
use appmon::sniffer::{
    run_sniffer, run_sniffer_threaded, ExtractedRecord, RecordFileWriter, RecordSink, SinkError, SnifferConfig, SnifferError,
    SnifferMode, SnifferStats, UdpForwarder, DEFAULT_WATCHED_PORTS,
};
use appmon::switch::{render_summary, replay};
use appmon::traffic_gen::{generate, WorkloadSpec};
use thiserror::Error;

use crate::config::Defaults;
use crate::{Cli, CollectArgs, Command, GenArgs, ReportArgs, SniffArgs, SniffMode, SwitchArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Input(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Opening or recognising a capture is an input problem; failing halfway
/// through one is a runtime ingest failure.
fn pcap_error(path: &Path, e: PcapError) -> CliError {
    let err = anyhow!(e).context(format!("capture {}", path.display()));
    match err.downcast_ref::<PcapError>() {
        Some(PcapError::BadMagic(_) | PcapError::LinkType(_)) => CliError::Input(err),
        Some(PcapError::Io(io)) if io.kind() == io::ErrorKind::NotFound => CliError::Input(err),
        _ => CliError::Runtime(err),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display())).map_err(input)
}

fn engine_config(defaults: &Defaults, window_ms: Option<u64>) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::default();
    if let Some(ms) = window_ms.or(defaults.window_ms) {
        if ms == 0 {
            return Err(CliError::Usage("--window-ms must be positive".into()));
        }
        cfg.window_len_us = ms * 1000;
    }
    if let Some(ms) = defaults.idle_timeout_ms {
        cfg.idle_timeout_us = ms * 1000;
    }
    Ok(cfg)
}

fn watched_ports(defaults: &Defaults, flag: Option<Vec<u16>>) -> Result<BTreeSet<u16>> {
    let ports: BTreeSet<u16> = flag.or_else(|| defaults.ports.clone()).map(BTreeSet::from_iter).unwrap_or_else(|| DEFAULT_WATCHED_PORTS.into());
    if ports.is_empty() {
        return Err(CliError::Usage("at least one watched port is required".into()));
    }
    Ok(ports)
}

fn write_report(report: &Report, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_report_file(report, p).with_context(|| format!("cannot write report {}", p.display())).map_err(runtime),
        None => {
            print!("{}", render_text(report));
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let defaults = match &cli.config {
        Some(path) => Defaults::load(path).map_err(CliError::Input)?,
        None => Defaults::default(),
    };
    match cli.command {
        Command::Gen(a) => gen(&defaults, a),
        Command::SwitchSim(a) => switch_sim(a),
        Command::Sniff(a) => sniff(&defaults, a),
        Command::Collect(a) => collect(&defaults, a),
        Command::Report(a) => report(a),
    }
}

fn gen(defaults: &Defaults, a: GenArgs) -> Result<()> {
    let text = read_text(&a.spec, "workload spec")?;
    let spec = WorkloadSpec::from_toml(&text).with_context(|| format!("workload spec {}", a.spec.display())).map_err(input)?;
    let seed = a.seed.or(defaults.seed).unwrap_or(0);
    let trace = generate(&spec, seed).map_err(input)?;
    write_file(&a.out, &trace.records).map_err(|e| runtime(anyhow!(e).context(format!("cannot write {}", a.out.display()))))?;
    if let Some(path) = &a.oracle {
        let f = File::create(path).with_context(|| format!("cannot create {}", path.display())).map_err(runtime)?;
        serde_json::to_writer_pretty(BufWriter::new(f), &trace.oracle).map_err(runtime)?;
    }
    println!(
        "generated {} packets for {} requests (seed {seed}) -> {}",
        trace.records.len(),
        trace.oracle.requests.len(),
        a.out.display()
    );
    Ok(())
}

fn switch_sim(a: SwitchArgs) -> Result<()> {
    let text = read_text(&a.rules, "rules file")?;
    let rules = parse_rules(&text).with_context(|| format!("rules file {}", a.rules.display())).map_err(input)?;
    let records = read_file(&a.pcap_in).map_err(|e| pcap_error(&a.pcap_in, e))?;
    let run = replay(&rules.table, records, &rules.rule_lines);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display())).map_err(runtime)?;
    for (port, recs) in &run.ports {
        let path = a.out_dir.join(format!("port-{}.pcap", port.0));
        write_file(&path, recs).map_err(|e| runtime(anyhow!(e).context(format!("cannot write {}", path.display()))))?;
    }
    let summary_path = a.out_dir.join("summary.json");
    let f = File::create(&summary_path).with_context(|| format!("cannot create {}", summary_path.display())).map_err(runtime)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &run.summary).map_err(runtime)?;
    print!("{}", render_summary(&run.summary));
    Ok(())
}

/// Forward-mode sink: UDP and/or a record file.
struct ForwardSink {
    udp: Option<UdpForwarder>,
    file: Option<RecordFileWriter<BufWriter<File>>>,
}

impl RecordSink for ForwardSink {
    fn deliver(&mut self, r: &ExtractedRecord) -> std::result::Result<(), SinkError> {
        if let Some(f) = &mut self.file {
            f.deliver(r)?;
        }
        if let Some(u) = &mut self.udp {
            u.deliver(r)?;
        }
        Ok(())
    }
}

fn run_sniff<S: RecordSink>(cfg: &SnifferConfig, path: &Path, threaded: bool, sink: S) -> Result<SnifferStats> {
    let mut reader = PcapReader::open(path).map_err(|e| pcap_error(path, e))?;
    let result = if threaded {
        run_sniffer_threaded(cfg, reader, sink)
    } else {
        run_sniffer(cfg, &mut reader, sink)
    };
    result.map_err(|e| match e {
        SnifferError::Source(pe) => pcap_error(path, pe),
        SnifferError::ZeroCapacity | SnifferError::NoWatchedPorts => CliError::Usage(e.to_string()),
        other => runtime(other),
    })
}

fn sniff(defaults: &Defaults, a: SniffArgs) -> Result<()> {
    let capacity = a.buffer.or(defaults.buffer_capacity).unwrap_or(SnifferConfig::default().buffer_capacity);
    if capacity == 0 {
        return Err(CliError::Usage("--buffer must be at least 1".into()));
    }
    let mut cfg = SnifferConfig {
        watched_ports: watched_ports(defaults, a.ports)?,
        buffer_capacity: capacity,
        ..Default::default()
    };
    let stats = match a.mode {
        SniffMode::Onsite => {
            let engine_cfg = engine_config(defaults, a.window_ms)?;
            let mut engine = AnalysisEngine::new(engine_cfg);
            let stats = run_sniff(&cfg, &a.pcap_in, a.threaded, &mut engine)?;
            let windows = engine.flush();
            let mut report = Report::new(engine_cfg.window_len_us, a.top_n.or(defaults.top_n).unwrap_or(DEFAULT_TOP_N), &windows, engine.stats());
            report.outstanding = engine.pending_total() as u64;
            write_report(&report, a.report.as_deref())?;
            stats
        }
        SniffMode::Forward => {
            if a.forward.is_none() && a.records_out.is_none() {
                return Err(CliError::Usage("forward mode needs --forward <ip:port> and/or --records-out <file>".into()));
            }
            if let Some(dest) = a.forward {
                cfg.mode = SnifferMode::Forward(dest);
            }
            let udp = a.forward.map(UdpForwarder::new).transpose().context("cannot open forwarding socket").map_err(runtime)?;
            let file = match &a.records_out {
                Some(p) => Some(RecordFileWriter::new(BufWriter::new(
                    File::create(p).with_context(|| format!("cannot create {}", p.display())).map_err(runtime)?,
                ))),
                None => None,
            };
            let mut sink = ForwardSink { udp, file };
            let stats = run_sniff(&cfg, &a.pcap_in, a.threaded, &mut sink)?;
            if let Some(f) = sink.file.take() {
                f.finish().context("cannot flush record file").map_err(runtime)?;
            }
            stats
        }
    };
    eprintln!("sniffer: {}", serde_json::to_string(&stats).map_err(runtime)?);
    Ok(())
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

fn collector_error(e: CollectorError) -> CliError {
    if e.is_input_format() || matches!(e, CollectorError::Open { .. }) {
        CliError::Input(e.into())
    } else {
        CliError::Runtime(e.into())
    }
}

fn collect(defaults: &Defaults, a: CollectArgs) -> Result<()> {
    let config = CollectorConfig {
        engine: engine_config(defaults, a.window_ms)?,
        watched_ports: watched_ports(defaults, a.ports)?,
        top_n: a.top_n.or(defaults.top_n).unwrap_or(DEFAULT_TOP_N),
        dump: a.dump.clone(),
        dump_only: a.dump_only,
        keep_samples: false,
    };
    let listen: Vec<_> = a
        .records_listen
        .iter()
        .map(|&s| (IngestKind::Records, s))
        .chain(a.mirror_listen.iter().map(|&s| (IngestKind::RawMirror, s)))
        .chain(a.tunnel_listen.iter().map(|&s| (IngestKind::Tunneled, s)))
        .collect();
    let files: Vec<FileInput> = a
        .pcap_in
        .iter()
        .map(|p| FileInput {
            path: p.clone(),
            kind: IngestKind::Auto,
        })
        .chain(a.records_in.iter().map(|p: &PathBuf| FileInput {
            path: p.clone(),
            kind: IngestKind::Records,
        }))
        .collect();
    if !listen.is_empty() && !files.is_empty() {
        return Err(CliError::Usage("socket listeners and input files cannot be combined".into()));
    }

    let report = if listen.is_empty() {
        run_collector(config, &files).map_err(collector_error)?
    } else {
        let sc = SocketCollector::bind(config, &listen).map_err(collector_error)?;
        for addr in sc.local_addrs() {
            eprintln!("listening on {addr}");
        }
        if let Err(e) = ctrlc::set_handler(|| SHUTDOWN.store(true, Ordering::Relaxed)) {
            log::warn!("cannot install Ctrl-C handler: {e}");
        }
        sc.run(&SHUTDOWN, a.duration_ms.map(Duration::from_millis)).map_err(collector_error)?
    };
    write_report(&report, a.report.as_deref())?;
    for s in &report.sources {
        eprintln!(
            "source {}: ingested {} events {} malformed {} filtered {}",
            s.name, s.ingested, s.events, s.malformed, s.filtered
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("cannot read report {}", a.input.display())).map_err(input)?;
    let report = read_json(io::BufReader::new(f)).with_context(|| format!("report {}", a.input.display())).map_err(input)?;
    print!("{}", render_text(&report));
    if let Some(path) = &a.csv {
        let f = File::create(path).with_context(|| format!("cannot create {}", path.display())).map_err(runtime)?;
        write_csv(&report.windows, BufWriter::new(f)).map_err(runtime)?;
    }
    if let Some(path) = &a.plot {
        let mut f = File::create(path).with_context(|| format!("cannot create {}", path.display())).map_err(runtime)?;
        f.write_all(plot_data(&report).as_bytes()).map_err(runtime)?;
    }
    Ok(())
}
