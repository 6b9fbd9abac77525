use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c2lab::harness::{self, FairnessSetup, HarnessError, OutputFormat};
use c2lab::scenario::ScenarioError;
use c2lab::trace::{gen_constant, gen_variable, VariableParams};
use c2lab::Micros;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "c2lab", version, about = "Trace-driven congestion-control experiments")]
struct Cli {
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Format of summary tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run { scenario: PathBuf },
    /// Re-run a scenario once per delay Target.
    SweepTarget {
        scenario: PathBuf,
        /// Targets in milliseconds.
        #[arg(long, value_delimiter = ',', default_values_t = [25.0, 50.0, 75.0])]
        targets: Vec<f64>,
    },
    /// Re-run a scenario per buffer size, with and without the overlay.
    SweepBuffer {
        scenario: PathBuf,
        /// Buffer sizes in bytes.
        #[arg(long, value_delimiter = ',', default_values_t = [75_000u64, 150_000, 375_000, 750_000, 1_500_000])]
        sizes: Vec<u64>,
    },
    /// Two flows through one shared queue; the second starts late.
    Fairness {
        /// `newreno`, `cubic` or `c2tcp:<target_ms>[:newreno|cubic]`.
        scheme_a: String,
        scheme_b: String,
        #[arg(long, default_value_t = 24.0)]
        link_mbps: f64,
        #[arg(long, default_value_t = 20)]
        rtt_ms: u64,
        #[arg(long, default_value_t = 40)]
        buffer_packets: u64,
        #[arg(long, default_value_t = 30)]
        second_start_s: u64,
        #[arg(long, default_value_t = 90)]
        duration_s: u64,
    },
    /// Write a synthetic trace file.
    GenTrace {
        #[arg(value_enum)]
        kind: TraceKind,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        /// Rate of a constant trace.
        #[arg(long, default_value_t = 12.0)]
        mbps: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        median_mbps: Option<f64>,
        #[arg(long)]
        min_mbps: Option<f64>,
        #[arg(long)]
        max_mbps: Option<f64>,
        #[arg(long)]
        volatility: Option<f64>,
        #[arg(long)]
        fade_probability: Option<f64>,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum TraceKind {
    Constant,
    Variable,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("c2lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), HarnessError> {
    let out = cli.out_dir.as_path();
    let format = cli.format.into();
    match &cli.command {
        Command::Run { scenario } => {
            let o = harness::cmd_run(scenario, out, format)?;
            for s in &o.summaries {
                let flow = s.flow_id.map_or_else(|| "all".to_string(), |f| f.to_string());
                println!(
                    "{flow:>4} {:<20} {:8.3} Mbps  avg q {:7.2} ms  p95 q {:7.2} ms  e2e {:7.2} ms  jitter {:6.2} ms",
                    s.scheme,
                    s.throughput_mbps,
                    s.avg_queuing_delay_ms,
                    s.p95_queuing_delay_ms,
                    s.avg_e2e_delay_ms,
                    s.jitter_ms
                );
            }
        }
        Command::SweepTarget { scenario, targets } => {
            for r in harness::cmd_sweep_target(scenario, targets, out, format)? {
                println!(
                    "target {:6.1} ms  {:8.3} Mbps  e2e {:7.2} ms",
                    r.target_ms, r.throughput_mbps, r.avg_e2e_delay_ms
                );
            }
        }
        Command::SweepBuffer { scenario, sizes } => {
            for r in harness::cmd_sweep_buffer(scenario, sizes, out, format)? {
                println!(
                    "{:>9} B {:<20} {:8.3} Mbps  avg q {:8.2} ms",
                    r.buffer_bytes, r.scheme, r.throughput_mbps, r.avg_queuing_delay_ms
                );
            }
        }
        Command::Fairness {
            scheme_a,
            scheme_b,
            link_mbps,
            rtt_ms,
            buffer_packets,
            second_start_s,
            duration_s,
        } => {
            let setup = FairnessSetup {
                link_mbps: *link_mbps,
                base_rtt: Micros::from_millis(*rtt_ms),
                buffer_packets: *buffer_packets,
                second_start: Micros::from_secs(*second_start_s),
                duration: Micros::from_secs(*duration_s),
                ..FairnessSetup::default()
            };
            if setup.second_start >= setup.duration || setup.final_window > setup.duration {
                return Err(HarnessError::Config("second flow must start before the run ends".into()));
            }
            let r = harness::cmd_fairness(scheme_a, scheme_b, &setup, out, format)?;
            println!(
                "{} {:.3} Mbps / {} {:.3} Mbps  jain {:.3} ({})",
                r.schemes[0], r.throughput_mbps[0], r.schemes[1], r.throughput_mbps[1], r.jain_index, r.note
            );
        }
        Command::GenTrace {
            kind,
            out: path,
            seconds,
            mbps,
            seed,
            median_mbps,
            min_mbps,
            max_mbps,
            volatility,
            fade_probability,
        } => {
            let duration = Micros::from_secs_f64(*seconds);
            let trace = match kind {
                TraceKind::Constant => gen_constant(*mbps, duration),
                TraceKind::Variable => {
                    let d = VariableParams::default();
                    let params = VariableParams {
                        median_mbps: median_mbps.unwrap_or(d.median_mbps),
                        min_mbps: min_mbps.unwrap_or(d.min_mbps),
                        max_mbps: max_mbps.unwrap_or(d.max_mbps),
                        volatility: volatility.unwrap_or(d.volatility),
                        fade_probability: fade_probability.unwrap_or(d.fade_probability),
                        ..d
                    };
                    gen_variable(*seed, duration, &params)
                }
            }
            .map_err(ScenarioError::from)?;
            match path {
                Some(p) => write_trace(p, &trace.serialize())?,
                None => print!("{}", trace.serialize()),
            }
        }
    }
    Ok(())
}

fn write_trace(path: &Path, text: &str) -> Result<(), HarnessError> {
    use std::io::Write;
    harness::write_atomic(path, |w| {
        w.write_all(text.as_bytes()).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}
