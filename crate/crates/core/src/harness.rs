//! Experiment drivers behind the command-line tool.
//!
//! Every driver is deterministic. Sweeps fan their runs out over a rayon
//! pool; each run owns its own emulator state. Files are written to a
//! temporary name and renamed into place.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cc::Flavor;
use crate::emu::{self, CcSpec, EmuConfig, EmuError, FlowReport, FlowSpec, QueueMode, RunReport};
use crate::metrics::{self, jain_index, MetricsError, RunSummary, SeriesPoint, SummaryWindow};
use crate::scenario::{Scenario, ScenarioError};
use crate::trace::gen_constant;
use crate::Micros;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("emulation failed: {0}")]
    Emu(EmuError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<EmuError> for HarnessError {
    fn from(e: EmuError) -> Self {
        match e {
            EmuError::Cc(_) => HarnessError::Emu(e),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl HarnessError {
    /// 1 for configuration problems, 2 for failures while running or writing.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Scenario(_) | HarnessError::Config(_) => 1,
            HarnessError::Emu(_) | HarnessError::Metrics(_) | HarnessError::Io { .. } => 2,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(HarnessError::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Parses `newreno`, `cubic` or `c2tcp:<target_ms>[:newreno|cubic]`.
pub fn parse_scheme(s: &str) -> Result<CcSpec, HarnessError> {
    let bad = || HarnessError::Config(format!("unknown scheme {s:?}"));
    let mut parts = s.split(':');
    match parts.next() {
        Some("newreno") if parts.next().is_none() => Ok(CcSpec::LossBased(Flavor::NewReno)),
        Some("cubic") if parts.next().is_none() => Ok(CcSpec::LossBased(Flavor::Cubic)),
        Some("c2tcp") => {
            let target: f64 = parts.next().unwrap_or("50").parse().map_err(|_| bad())?;
            if !(target > 0.0 && target.is_finite()) {
                return Err(bad());
            }
            let base = match parts.next() {
                None | Some("cubic") => Flavor::Cubic,
                Some("newreno") => Flavor::NewReno,
                Some(_) => return Err(bad()),
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok(CcSpec::C2tcp {
                base,
                target: Micros::from_millis_f64(target),
                initial_alpha: None,
            })
        }
        _ => Err(bad()),
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic<T>(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    let out = body(&mut w)?;
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(MetricsError::from)?;
        writeln!(w).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r).map_err(MetricsError::from)?;
        }
        c.flush().map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn base_dir(scenario_path: &Path) -> PathBuf {
    scenario_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Runs a scenario whose relative trace paths resolve against `base_dir`.
pub fn run_scenario(scenario: &Scenario, base_dir: &Path) -> Result<RunReport, HarnessError> {
    let config = scenario.emu_config(base_dir)?;
    let flows = scenario.flow_specs()?;
    Ok(emu::run::<f64>(&config, &flows, scenario.duration())?)
}

/// Everything `run` writes besides the per-packet CSV.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutput {
    pub scenario: String,
    pub duration_s: f64,
    /// Averages exclude this much of every flow's lifetime.
    pub warmup_s: f64,
    /// Delay series the `jitter_ms` column is computed on.
    pub jitter_basis: &'static str,
    pub summaries: Vec<RunSummary>,
    pub flows: Vec<FlowReport>,
}

pub const JITTER_BASIS: &str = "e2e_rtt";

impl RunOutput {
    pub fn new(scenario: &Scenario, report: &RunReport) -> Self {
        RunOutput {
            scenario: scenario.name.clone(),
            duration_s: report.duration.as_secs_f64(),
            warmup_s: report.warmup.as_secs_f64(),
            jitter_basis: JITTER_BASIS,
            summaries: report.summaries(),
            flows: report.flows.clone(),
        }
    }
}

/// Per-second series of every flow.
pub fn flow_series(report: &RunReport) -> Vec<SeriesPoint> {
    (0..report.flows.len())
        .flat_map(|f| metrics::time_series(&report.records, f, Micros::from_secs(1), report.duration))
        .collect()
}

/// `run <scenario>`: writes `summary.{csv,json}`, `packets.csv` and
/// `timeseries.csv` into `out_dir`.
pub fn cmd_run(scenario_path: &Path, out_dir: &Path, format: OutputFormat) -> Result<RunOutput, HarnessError> {
    let scenario = Scenario::load(scenario_path)?;
    let report = run_scenario(&scenario, &base_dir(scenario_path))?;
    ensure_dir(out_dir)?;
    let output = RunOutput::new(&scenario, &report);
    write_summary(out_dir, &output, format)?;
    if scenario.outputs.packets {
        write_atomic(&out_dir.join("packets.csv"), |w| {
            Ok(metrics::write_packets_csv(&report.records, w)?)
        })?;
    }
    if scenario.outputs.timeseries {
        write_csv_rows(&out_dir.join("timeseries.csv"), &flow_series(&report))?;
    }
    Ok(output)
}

fn write_summary(out_dir: &Path, output: &RunOutput, format: OutputFormat) -> Result<(), HarnessError> {
    match format {
        OutputFormat::Csv => write_atomic(&out_dir.join("summary.csv"), |w| {
            Ok(metrics::write_summary_csv(&output.summaries, w)?)
        }),
        OutputFormat::Json => write_json(&out_dir.join("summary.json"), output),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetRow {
    pub target_ms: f64,
    pub throughput_mbps: f64,
    pub avg_e2e_delay_ms: f64,
    pub avg_queuing_delay_ms: f64,
    pub p95_queuing_delay_ms: f64,
    pub jitter_ms: f64,
}

/// One run per Target; rows come back in the order of `targets_ms`.
pub fn sweep_target(base: &Scenario, base_dir: &Path, targets_ms: &[f64]) -> Result<Vec<TargetRow>, HarnessError> {
    if targets_ms.is_empty() {
        return Err(HarnessError::Config("target list is empty".into()));
    }
    if !base.has_c2tcp() {
        return Err(HarnessError::Config("scenario has no c2tcp flow to steer".into()));
    }
    targets_ms
        .par_iter()
        .map(|&t| {
            let report = run_scenario(&base.with_target(t), base_dir)?;
            let s = report.aggregate_summary();
            Ok(TargetRow {
                target_ms: t,
                throughput_mbps: s.throughput_mbps,
                avg_e2e_delay_ms: s.avg_e2e_delay_ms,
                avg_queuing_delay_ms: s.avg_queuing_delay_ms,
                p95_queuing_delay_ms: s.p95_queuing_delay_ms,
                jitter_ms: s.jitter_ms,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BufferRow {
    pub buffer_bytes: u64,
    pub scheme: String,
    pub throughput_mbps: f64,
    pub avg_queuing_delay_ms: f64,
    pub p95_queuing_delay_ms: f64,
    pub avg_e2e_delay_ms: f64,
}

/// For every size, runs the scenario as given and with the overlay removed.
pub fn sweep_buffer(base: &Scenario, base_dir: &Path, sizes: &[u64]) -> Result<Vec<BufferRow>, HarnessError> {
    if sizes.is_empty() {
        return Err(HarnessError::Config("buffer size list is empty".into()));
    }
    if !base.has_c2tcp() {
        return Err(HarnessError::Config("scenario has no c2tcp flow to compare".into()));
    }
    let variants = [base.clone(), base.without_overlay()];
    let jobs: Vec<(u64, &Scenario)> = sizes.iter().flat_map(|&b| variants.iter().map(move |v| (b, v))).collect();
    jobs.par_iter()
        .map(|&(bytes, variant)| {
            let mut s = variant.clone();
            s.link.buffer_bytes = bytes;
            let report = run_scenario(&s, base_dir)?;
            let sum = report.aggregate_summary();
            Ok(BufferRow {
                buffer_bytes: bytes,
                scheme: sum.scheme,
                throughput_mbps: sum.throughput_mbps,
                avg_queuing_delay_ms: sum.avg_queuing_delay_ms,
                p95_queuing_delay_ms: sum.p95_queuing_delay_ms,
                avg_e2e_delay_ms: sum.avg_e2e_delay_ms,
            })
        })
        .collect()
}

/// Two flows through one shared queue; the second joins late.
#[derive(Clone, Debug, PartialEq)]
pub struct FairnessSetup {
    pub link_mbps: f64,
    pub base_rtt: Micros,
    pub buffer_packets: u64,
    pub second_start: Micros,
    pub duration: Micros,
    /// Shares and the index are computed over the last this-much of the run.
    pub final_window: Micros,
}

impl Default for FairnessSetup {
    fn default() -> Self {
        FairnessSetup {
            link_mbps: 24.0,
            base_rtt: Micros::from_millis(20),
            buffer_packets: 40,
            second_start: Micros::from_secs(30),
            duration: Micros::from_secs(90),
            final_window: Micros::from_secs(30),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FairnessResult {
    pub schemes: [String; 2],
    pub link_mbps: f64,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub throughput_mbps: [f64; 2],
    /// Each flow's throughput as a fraction of the link rate.
    pub link_share: [f64; 2],
    pub jain_index: f64,
    /// Pass/fail thresholds applied to `jain_index` are a numeric proxy for
    /// qualitative fairness.
    pub note: &'static str,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
    #[serde(skip)]
    pub report: RunReport,
}

pub const JAIN_NOTE: &str = "jain_index thresholds are a numeric proxy for qualitative fairness";

pub fn fairness(a: CcSpec, b: CcSpec, setup: &FairnessSetup) -> Result<FairnessResult, HarnessError> {
    let trace = gen_constant(setup.link_mbps, Micros::from_secs(1)).map_err(ScenarioError::from)?;
    let mut config = EmuConfig::new(trace);
    config.base_rtt = setup.base_rtt;
    config.buffer_bytes = setup.buffer_packets * u64::from(config.mtu_bytes);
    config.queue_mode = QueueMode::Shared;
    let flows = [FlowSpec::new(a), FlowSpec::new(b).starting_at(setup.second_start)];
    let report = emu::run::<f64>(&config, &flows, setup.duration)?;
    let window = SummaryWindow::new(setup.duration.saturating_sub(setup.final_window), setup.duration);
    let throughput = [0, 1].map(|i| report.flow_summary_in(i, window).throughput_mbps);
    let jain = jain_index(&throughput)?;
    Ok(FairnessResult {
        schemes: [a.label(), b.label()],
        link_mbps: setup.link_mbps,
        window_start_s: window.start.as_secs_f64(),
        window_end_s: window.end.as_secs_f64(),
        throughput_mbps: throughput,
        link_share: throughput.map(|t| t / setup.link_mbps),
        jain_index: jain,
        note: JAIN_NOTE,
        series: flow_series(&report),
        report,
    })
}

/// `sweep-target`: writes `sweep_target.{csv,json}`.
pub fn cmd_sweep_target(
    scenario_path: &Path,
    targets_ms: &[f64],
    out_dir: &Path,
    format: OutputFormat,
) -> Result<Vec<TargetRow>, HarnessError> {
    let scenario = Scenario::load(scenario_path)?;
    let rows = sweep_target(&scenario, &base_dir(scenario_path), targets_ms)?;
    ensure_dir(out_dir)?;
    write_rows(out_dir, "sweep_target", &rows, format)?;
    Ok(rows)
}

/// `sweep-buffer`: writes `sweep_buffer.{csv,json}`.
pub fn cmd_sweep_buffer(
    scenario_path: &Path,
    sizes: &[u64],
    out_dir: &Path,
    format: OutputFormat,
) -> Result<Vec<BufferRow>, HarnessError> {
    let scenario = Scenario::load(scenario_path)?;
    let rows = sweep_buffer(&scenario, &base_dir(scenario_path), sizes)?;
    ensure_dir(out_dir)?;
    write_rows(out_dir, "sweep_buffer", &rows, format)?;
    Ok(rows)
}

/// `fairness`: writes `fairness.{csv,json}` and `fairness_timeseries.csv`.
pub fn cmd_fairness(
    a: &str,
    b: &str,
    setup: &FairnessSetup,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<FairnessResult, HarnessError> {
    let result = fairness(parse_scheme(a)?, parse_scheme(b)?, setup)?;
    ensure_dir(out_dir)?;
    write_rows(out_dir, "fairness", std::slice::from_ref(&FairnessRow::from(&result)), format)?;
    write_csv_rows(&out_dir.join("fairness_timeseries.csv"), &result.series)?;
    Ok(result)
}

#[derive(Serialize)]
struct FairnessRow {
    scheme_a: String,
    scheme_b: String,
    link_mbps: f64,
    window_start_s: f64,
    window_end_s: f64,
    throughput_a_mbps: f64,
    throughput_b_mbps: f64,
    share_a: f64,
    share_b: f64,
    jain_index: f64,
    note: &'static str,
}

impl From<&FairnessResult> for FairnessRow {
    fn from(r: &FairnessResult) -> Self {
        FairnessRow {
            scheme_a: r.schemes[0].clone(),
            scheme_b: r.schemes[1].clone(),
            link_mbps: r.link_mbps,
            window_start_s: r.window_start_s,
            window_end_s: r.window_end_s,
            throughput_a_mbps: r.throughput_mbps[0],
            throughput_b_mbps: r.throughput_mbps[1],
            share_a: r.link_share[0],
            share_b: r.link_share[1],
            jain_index: r.jain_index,
            note: r.note,
        }
    }
}

fn write_rows<T: Serialize>(out_dir: &Path, stem: &str, rows: &[T], format: OutputFormat) -> Result<(), HarnessError> {
    match format {
        OutputFormat::Csv => write_csv_rows(&out_dir.join(format!("{stem}.csv")), rows),
        OutputFormat::Json => write_json(&out_dir.join(format!("{stem}.json")), &rows),
    }
}
