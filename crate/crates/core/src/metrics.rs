//! Evaluation metrics over per-packet delivery records.
//!
//! Queuing delay is measured at the bottleneck (enqueue to dequeue).
//! End-to-end delay is the RTT seen by the sender when the packet's ack
//! arrives, i.e. queuing delay plus the base RTT.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Micros, Scalar};

/// Gain of the smoothed delay used by [`jitter`].
pub const JITTER_DELAY_GAIN: f64 = 1.0 / 8.0;
/// Gain of the mean deviation used by [`jitter`].
pub const JITTER_DEV_GAIN: f64 = 1.0 / 4.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no packet records to summarize")]
    NoRecords,
    #[error("fairness index needs at least one positive throughput")]
    NoThroughput,
    #[error("writing output: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing output: {0}")]
    Json(#[from] serde_json::Error),
}

/// One delivered data packet.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub flow_id: usize,
    pub seq: u64,
    pub sent_at: Micros,
    pub delivered_at: Micros,
    pub queuing_delay: Micros,
    /// Filled when the ack for this delivery reaches the sender.
    pub e2e_rtt: Option<Micros>,
    pub size_bytes: u32,
}

/// Time window the averages are computed over: records delivered in
/// `[start, end)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryWindow {
    pub start: Micros,
    pub end: Micros,
}

impl SummaryWindow {
    pub fn new(start: Micros, end: Micros) -> Self {
        SummaryWindow { start, end }
    }

    pub fn contains(&self, t: Micros) -> bool {
        t >= self.start && t < self.end
    }

    pub fn secs(&self) -> f64 {
        self.end.saturating_sub(self.start).as_secs_f64()
    }
}

/// Per-flow (or aggregate) metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub flow_id: Option<usize>,
    pub scheme: String,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub packets: u64,
    pub throughput_mbps: f64,
    pub avg_queuing_delay_ms: f64,
    pub p95_queuing_delay_ms: f64,
    pub avg_e2e_delay_ms: f64,
    pub p95_e2e_delay_ms: f64,
    /// Mean deviation of end-to-end delay.
    pub jitter_ms: f64,
    /// Mean deviation of queuing delay.
    pub jitter_queuing_ms: f64,
    /// Share of the link's delivery capacity used; `None` when unknown.
    pub utilization: Option<f64>,
    pub loss_count: u64,
}

impl RunSummary {
    /// Summary of a flow that delivered nothing in its window.
    pub fn empty(window: SummaryWindow) -> Self {
        RunSummary {
            flow_id: None,
            scheme: String::new(),
            window_start_s: window.start.as_secs_f64(),
            window_end_s: window.end.as_secs_f64(),
            packets: 0,
            throughput_mbps: 0.0,
            avg_queuing_delay_ms: 0.0,
            p95_queuing_delay_ms: 0.0,
            avg_e2e_delay_ms: 0.0,
            p95_e2e_delay_ms: 0.0,
            jitter_ms: 0.0,
            jitter_queuing_ms: 0.0,
            utilization: Some(0.0),
            loss_count: 0,
        }
    }
}

/// Aggregates the records delivered inside `window`.
pub fn summarize(records: &[PacketRecord], window: SummaryWindow) -> Result<RunSummary, MetricsError> {
    let inside: Vec<&PacketRecord> = records.iter().filter(|r| window.contains(r.delivered_at)).collect();
    if inside.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let bytes: u64 = inside.iter().map(|r| u64::from(r.size_bytes)).sum();
    let secs = window.secs();
    let throughput_mbps = if secs > 0.0 { bytes as f64 * 8.0 / secs / 1e6 } else { 0.0 };

    let queuing: Vec<f64> = inside.iter().map(|r| r.queuing_delay.as_millis_f64()).collect();
    let e2e: Vec<f64> = inside
        .iter()
        .filter_map(|r| r.e2e_rtt.map(Micros::as_millis_f64))
        .collect();
    let (avg_e2e, p95_e2e, jitter_e2e) = if e2e.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (mean(&e2e), percentile_nearest_rank(&e2e, 95.0), jitter(&e2e))
    };

    Ok(RunSummary {
        flow_id: None,
        scheme: String::new(),
        window_start_s: window.start.as_secs_f64(),
        window_end_s: window.end.as_secs_f64(),
        packets: inside.len() as u64,
        throughput_mbps,
        avg_queuing_delay_ms: mean(&queuing),
        p95_queuing_delay_ms: percentile_nearest_rank(&queuing, 95.0),
        avg_e2e_delay_ms: avg_e2e,
        p95_e2e_delay_ms: p95_e2e,
        jitter_ms: jitter_e2e,
        jitter_queuing_ms: jitter(&queuing),
        utilization: None,
        loss_count: 0,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// samples at or below it. Returns 0 for an empty slice.
pub fn percentile_nearest_rank(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * xs.len() as f64).ceil().max(1.0) as usize;
    let k = rank.min(xs.len()) - 1;
    let mut v = xs.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *kth
}

/// Mean deviation of a delay series in arrival order.
///
/// The smoothed delay starts at the first sample; every later sample updates
/// `dev <- (1 - 1/4) dev + 1/4 |d - sdelay|` and then
/// `sdelay <- (1 - 1/8) sdelay + 1/8 d`. The result is the average of `dev`
/// over those updates (0 for fewer than two samples).
pub fn jitter<F: Scalar>(delays: &[F]) -> F {
    let Some((&first, rest)) = delays.split_first() else {
        return F::zero();
    };
    if rest.is_empty() {
        return F::zero();
    }
    let g_delay = F::lit(JITTER_DELAY_GAIN);
    let g_dev = F::lit(JITTER_DEV_GAIN);
    let mut sdelay = first;
    let mut dev = F::zero();
    let mut acc = F::zero();
    for &d in rest {
        dev = (F::one() - g_dev) * dev + g_dev * (d - sdelay).abs();
        sdelay = (F::one() - g_delay) * sdelay + g_delay * d;
        acc += dev;
    }
    acc / F::from_usize(rest.len()).unwrap()
}

/// Jain's fairness index `(sum x)^2 / (n sum x^2)`.
pub fn jain_index<F: Scalar>(throughputs: &[F]) -> Result<F, MetricsError> {
    let sum = throughputs.iter().fold(F::zero(), |a, &x| a + x);
    let sq = throughputs.iter().fold(F::zero(), |a, &x| a + x * x);
    if throughputs.is_empty() || sq <= F::zero() {
        return Err(MetricsError::NoThroughput);
    }
    Ok(sum * sum / (F::from_usize(throughputs.len()).unwrap() * sq))
}

/// One bin of a per-flow time series.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub flow: usize,
    /// Bin index; with one-second bins this is the second since time zero.
    pub second: u64,
    pub throughput_mbps: f64,
    pub avg_queuing_ms: f64,
    pub packets: u64,
}

/// Per-bin delivered throughput and mean queuing delay of one flow over
/// `[0, end)`.
pub fn time_series(records: &[PacketRecord], flow_id: usize, bin: Micros, end: Micros) -> Vec<SeriesPoint> {
    let bins = end.as_micros().div_ceil(bin.as_micros().max(1)) as usize;
    let mut bytes = vec![0_u64; bins];
    let mut qsum = vec![0_u64; bins];
    let mut count = vec![0_u64; bins];
    for r in records.iter().filter(|r| r.flow_id == flow_id && r.delivered_at < end) {
        let b = (r.delivered_at.as_micros() / bin.as_micros()) as usize;
        bytes[b] += u64::from(r.size_bytes);
        qsum[b] += r.queuing_delay.as_micros();
        count[b] += 1;
    }
    let bin_secs = bin.as_secs_f64();
    (0..bins)
        .map(|b| SeriesPoint {
            flow: flow_id,
            second: b as u64,
            throughput_mbps: bytes[b] as f64 * 8.0 / bin_secs / 1e6,
            avg_queuing_ms: if count[b] == 0 {
                0.0
            } else {
                qsum[b] as f64 / count[b] as f64 / 1_000.0
            },
            packets: count[b],
        })
        .collect()
}

#[derive(Serialize)]
struct PacketRow {
    flow: usize,
    seq: u64,
    sent_at_us: u64,
    delivered_at_us: u64,
    queuing_us: u64,
}

/// Per-packet CSV: `flow,seq,sent_at_us,delivered_at_us,queuing_us`.
pub fn write_packets_csv<W: Write>(records: &[PacketRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(PacketRow {
            flow: r.flow_id,
            seq: r.seq,
            sent_at_us: r.sent_at.as_micros(),
            delivered_at_us: r.delivered_at.as_micros(),
            queuing_us: r.queuing_delay.as_micros(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    flow: String,
    scheme: &'a str,
    window_start_s: f64,
    window_end_s: f64,
    packets: u64,
    throughput_mbps: f64,
    avg_queuing_delay_ms: f64,
    p95_queuing_delay_ms: f64,
    avg_e2e_delay_ms: f64,
    p95_e2e_delay_ms: f64,
    jitter_ms: f64,
    jitter_queuing_ms: f64,
    utilization: String,
    loss_count: u64,
}

/// One CSV row per summary; the aggregate row has flow `all`.
pub fn write_summary_csv<W: Write>(summaries: &[RunSummary], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(SummaryRow {
            flow: s.flow_id.map_or_else(|| "all".to_string(), |f| f.to_string()),
            scheme: &s.scheme,
            window_start_s: s.window_start_s,
            window_end_s: s.window_end_s,
            packets: s.packets,
            throughput_mbps: s.throughput_mbps,
            avg_queuing_delay_ms: s.avg_queuing_delay_ms,
            p95_queuing_delay_ms: s.p95_queuing_delay_ms,
            avg_e2e_delay_ms: s.avg_e2e_delay_ms,
            p95_e2e_delay_ms: s.p95_e2e_delay_ms,
            jitter_ms: s.jitter_ms,
            jitter_queuing_ms: s.jitter_queuing_ms,
            utilization: s.utilization.map_or_else(String::new, |u| u.to_string()),
            loss_count: s.loss_count,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series_csv<W: Write>(points: &[SeriesPoint], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
