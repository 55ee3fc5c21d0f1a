// SPDX-License-Identifier: Apache-2.0

//! JSON / CSV / text rendering of window aggregates.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EngineStats, WindowAggregate};

pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("report JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report CSV error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrlCount {
    pub url: String,
    pub count: u64,
}

/// One report row per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub start_us: u64,
    pub len_us: u64,
    pub count: u64,
    pub min_us: Option<u64>,
    pub max_us: Option<u64>,
    pub mean_us: Option<f64>,
    pub load: u64,
    pub responses: u64,
    pub successes: u64,
    pub success_rate: Option<f64>,
    pub urls: Vec<UrlCount>,
}

impl WindowRow {
    pub fn from_aggregate(w: &WindowAggregate, top_n: usize) -> Self {
        WindowRow {
            start_us: w.start_us,
            len_us: w.len_us,
            count: w.count,
            min_us: w.min_us,
            max_us: w.max_us,
            mean_us: w.mean_us,
            load: w.load(),
            responses: w.response_count,
            successes: w.success_count,
            success_rate: w.success_rate(),
            urls: w.top_urls(top_n).into_iter().map(|(url, count)| UrlCount { url, count }).collect(),
        }
    }
}

/// Per-source ingest accounting: `ingested == events + malformed + filtered`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub name: String,
    pub ingested: u64,
    pub events: u64,
    pub malformed: u64,
    pub filtered: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub window_len_us: u64,
    pub top_n: usize,
    pub windows: Vec<WindowRow>,
    pub engine: EngineStats,
    #[serde(default)]
    pub sources: Vec<SourceSummary>,
    /// Requests still unmatched at the end of the run.
    #[serde(default)]
    pub outstanding: u64,
}

impl Report {
    pub fn new(window_len_us: u64, top_n: usize, windows: &[WindowAggregate], engine: EngineStats) -> Self {
        Report {
            window_len_us,
            top_n,
            windows: windows.iter().map(|w| WindowRow::from_aggregate(w, top_n)).collect(),
            engine,
            sources: Vec::new(),
            outstanding: 0,
        }
    }

    /// Total samples over all windows.
    pub fn sample_count(&self) -> u64 {
        self.windows.iter().map(|w| w.count).sum()
    }

    /// Success rate over all windows together.
    pub fn overall_success_rate(&self) -> Option<f64> {
        let (ok, all) = self
            .windows
            .iter()
            .fold((0u64, 0u64), |(ok, all), w| (ok + w.successes, all + w.responses));
        (all > 0).then(|| ok as f64 / all as f64)
    }
}

pub fn write_json<W: io::Write>(report: &Report, out: W) -> Result<(), ReportError> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}

pub fn read_json<R: io::Read>(input: R) -> Result<Report, ReportError> {
    Ok(serde_json::from_reader(input)?)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn url_list(urls: &[UrlCount]) -> String {
    urls.iter().map(|u| format!("{}:{}", u.url, u.count)).collect::<Vec<_>>().join(";")
}

pub const CSV_HEADER: [&str; 11] = [
    "start_us", "len_us", "count", "min_us", "max_us", "mean_us", "load", "responses", "successes", "success_rate", "urls",
];

pub fn write_csv<W: io::Write>(rows: &[WindowRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.start_us.to_string(),
            r.len_us.to_string(),
            r.count.to_string(),
            opt(&r.min_us),
            opt(&r.max_us),
            opt(&r.mean_us),
            r.load.to_string(),
            r.responses.to_string(),
            r.successes.to_string(),
            opt(&r.success_rate),
            url_list(&r.urls),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes JSON or CSV depending on the file extension (`.csv`, else JSON).
pub fn write_report_file(report: &Report, path: &Path) -> Result<(), ReportError> {
    let file = io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_csv(&report.windows, file)
    } else {
        write_json(report, file)
    }
}

/// Aligned-column text table.
pub fn render_text(report: &Report) -> String {
    let header = ["start_us", "count", "min_us", "max_us", "mean_us", "load", "success", "top urls"];
    let rows: Vec<[String; 8]> = report
        .windows
        .iter()
        .map(|r| {
            [
                r.start_us.to_string(),
                r.count.to_string(),
                opt(&r.min_us),
                opt(&r.max_us),
                r.mean_us.map(|m| format!("{m:.1}")).unwrap_or_default(),
                r.load.to_string(),
                r.success_rate.map(|s| format!("{s:.4}")).unwrap_or_default(),
                url_list(&r.urls),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let last = cells.len() - 1;
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i == last {
                out.push_str(cell);
            } else {
                let _ = write!(out, "{cell:>w$}  ");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    let e = &report.engine;
    let _ = writeln!(
        out,
        "\nwindows={} samples={} requests={} responses={} orphans={} outstanding={} late={}",
        report.windows.len(),
        e.samples,
        e.requests,
        e.responses,
        e.orphans,
        report.outstanding,
        e.late_events
    );
    if let Some(rate) = report.overall_success_rate() {
        let _ = writeln!(out, "overall success rate {rate:.4}");
    }
    for s in &report.sources {
        let _ = writeln!(
            out,
            "source {}: ingested={} events={} malformed={} filtered={}",
            s.name, s.ingested, s.events, s.malformed, s.filtered
        );
    }
    out
}

/// Whitespace-separated per-window columns for gnuplot and similar tools.
/// Missing values are written as `NaN`.
pub fn plot_data(report: &Report) -> String {
    let mut out = String::from("# start_s count min_us max_us mean_us load success_rate\n");
    let nan = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NaN".into());
    for r in &report.windows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            r.start_us as f64 / 1e6,
            r.count,
            nan(r.min_us.map(|x| x as f64)),
            nan(r.max_us.map(|x| x as f64)),
            nan(r.mean_us),
            r.load,
            nan(r.success_rate)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_report() -> Report {
        let w = WindowAggregate {
            start_us: 0,
            len_us: 1000,
            count: 3,
            sum_us: 600,
            min_us: Some(100),
            max_us: Some(300),
            mean_us: Some(200.0),
            request_count: 4,
            response_count: 4,
            success_count: 3,
            url_counts: BTreeMap::from([("/b".into(), 2), ("/a".into(), 2), ("/c".into(), 1)]),
        };
        let empty = WindowAggregate {
            start_us: 1000,
            count: 0,
            sum_us: 0,
            min_us: None,
            max_us: None,
            mean_us: None,
            request_count: 0,
            response_count: 0,
            success_count: 0,
            url_counts: BTreeMap::new(),
            ..w.clone()
        };
        Report::new(1000, 2, &[w, empty], EngineStats::default())
    }

    #[test]
    fn top_n_ties_alphabetical() {
        let r = sample_report();
        let urls: Vec<_> = r.windows[0].urls.iter().map(|u| (u.url.as_str(), u.count)).collect();
        assert_eq!(urls, vec![("/a", 2), ("/b", 2)]);
    }

    #[test]
    fn json_round_trip() {
        let r = sample_report();
        let mut buf = Vec::new();
        write_json(&r, &mut buf).unwrap();
        assert_eq!(read_json(&buf[..]).unwrap(), r);
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["windows"][0]["success_rate"], 0.75);
        assert!(v["windows"][1]["mean_us"].is_null());
    }

    #[test]
    fn csv_columns() {
        let r = sample_report();
        let mut buf = Vec::new();
        write_csv(&r.windows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "0,1000,3,100,300,200,4,4,3,0.75,/a:2;/b:2");
        assert_eq!(lines.next().unwrap(), "1000,1000,0,,,,0,0,0,,");
    }

    #[test]
    fn text_and_plot_render() {
        let r = sample_report();
        let text = render_text(&r);
        assert!(text.lines().next().unwrap().contains("start_us"));
        assert!(text.contains("overall success rate 0.7500"));
        let plot = plot_data(&r);
        assert_eq!(plot.lines().count(), 3);
        assert!(plot.lines().nth(2).unwrap().contains("NaN"));
    }
}
