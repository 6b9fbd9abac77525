//! Mahimahi-compatible bandwidth traces.
//!
//! A trace is a list of millisecond timestamps, one per line. Each line is a
//! delivery opportunity for one MTU-sized packet (1500 bytes); repeated
//! timestamps mean several opportunities in the same millisecond. The trace
//! loops with a period equal to its last timestamp.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::Micros;

/// Bytes carried by one delivery opportunity.
pub const OPPORTUNITY_BYTES: u64 = 1500;
/// 1 Mbit/s expressed in bytes per millisecond.
const BYTES_PER_MS_PER_MBPS: f64 = 125.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: `{text}` is not a non-negative integer millisecond timestamp")]
    NotAnInteger { line: usize, text: String },
    #[error("line {line}: timestamp {value} is smaller than the previous one ({previous})")]
    Decreasing { line: usize, value: u64, previous: u64 },
    #[error("invalid rate {0} Mbit/s")]
    InvalidRate(f64),
    #[error("invalid duration")]
    InvalidDuration,
    #[error("scale factor must be at least 1")]
    InvalidScale,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkTrace {
    opportunities: Vec<u64>,
    source: String,
}

impl LinkTrace {
    /// Builds a trace from already-validated millisecond timestamps.
    pub fn from_millis(opportunities: Vec<u64>, source: impl Into<String>) -> Result<Self, TraceError> {
        if opportunities.is_empty() {
            return Err(TraceError::Empty);
        }
        for (i, w) in opportunities.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(TraceError::Decreasing {
                    line: i + 2,
                    value: w[1],
                    previous: w[0],
                });
            }
        }
        Ok(LinkTrace {
            opportunities,
            source: source.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut trace = parse_trace(&text)?;
        trace.source = path.display().to_string();
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.serialize())
    }

    pub fn opportunities(&self) -> &[u64] {
        &self.opportunities
    }

    pub fn len(&self) -> usize {
        self.opportunities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opportunities.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Loop period in milliseconds (the last timestamp).
    pub fn period_ms(&self) -> u64 {
        *self.opportunities.last().expect("trace is never empty")
    }

    /// Long-run average capacity in Mbit/s at 1500 bytes per opportunity.
    pub fn average_mbps(&self) -> f64 {
        let period = self.period_ms();
        if period == 0 {
            return f64::INFINITY;
        }
        (self.len() as u64 * OPPORTUNITY_BYTES) as f64 / period as f64 / BYTES_PER_MS_PER_MBPS
    }

    /// Newline-separated timestamps with a trailing newline.
    pub fn serialize(&self) -> String {
        let mut out = String::with_capacity(self.len() * 6);
        for t in &self.opportunities {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    /// Multiplies capacity by repeating every opportunity `factor` times.
    pub fn scale(&self, factor: u32) -> Result<LinkTrace, TraceError> {
        if factor == 0 {
            return Err(TraceError::InvalidScale);
        }
        let opportunities = self
            .opportunities
            .iter()
            .flat_map(|&t| std::iter::repeat(t).take(factor as usize))
            .collect();
        Ok(LinkTrace {
            opportunities,
            source: format!("{}*{}", self.source, factor),
        })
    }

    /// Time of the `k`-th opportunity of the looped trace (k counts from 0).
    /// Requires a positive period.
    pub fn opportunity_at(&self, k: u64) -> Micros {
        let n = self.len() as u64;
        let lap = k / n;
        let i = (k % n) as usize;
        Micros::from_millis(self.opportunities[i] + lap * self.period_ms())
    }

    /// Index of the first looped opportunity at or after `t`.
    /// Requires a positive period.
    pub fn first_index_at_or_after(&self, t: Micros) -> u64 {
        let n = self.len() as u64;
        let period = self.period_ms();
        let m = t.as_micros().div_ceil(1_000);
        let mut lap = (m / period).saturating_sub(1);
        loop {
            let base = lap * period;
            let i = if m <= base {
                0
            } else {
                self.opportunities.partition_point(|&ts| ts < m - base)
            };
            if i < self.len() {
                return lap * n + i as u64;
            }
            lap += 1;
        }
    }

    /// Number of looped opportunities in `[start, end)`.
    pub fn opportunities_between(&self, start: Micros, end: Micros) -> u64 {
        if end <= start {
            return 0;
        }
        self.first_index_at_or_after(end) - self.first_index_at_or_after(start)
    }
}

pub fn parse_trace(text: &str) -> Result<LinkTrace, TraceError> {
    let mut opportunities = Vec::new();
    let mut previous = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: u64 = line.parse().map_err(|_| TraceError::NotAnInteger {
            line: idx + 1,
            text: line.to_string(),
        })?;
        if value < previous {
            return Err(TraceError::Decreasing {
                line: idx + 1,
                value,
                previous,
            });
        }
        previous = value;
        opportunities.push(value);
    }
    if opportunities.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(LinkTrace {
        opportunities,
        source: "inline".to_string(),
    })
}

fn check_rate(rate_mbps: f64, allow_zero: bool) -> Result<(), TraceError> {
    let ok = rate_mbps.is_finite() && (rate_mbps > 0.0 || (allow_zero && rate_mbps == 0.0));
    if ok {
        Ok(())
    } else {
        Err(TraceError::InvalidRate(rate_mbps))
    }
}

/// Evenly spaced opportunities at a constant rate.
pub fn gen_constant(rate_mbps: f64, duration: Micros) -> Result<LinkTrace, TraceError> {
    check_rate(rate_mbps, false)?;
    let mut trace = gen_step(&[(rate_mbps, duration)])?;
    trace.source = format!("constant:{rate_mbps}Mbps");
    Ok(trace)
}

/// Concatenated constant-rate segments. Fractional opportunities carry over
/// from one millisecond (and one segment) to the next, so a segment of
/// `r` Mbit/s lasting `d` ms contributes `r * d / 12` opportunities up to
/// rounding at its edges. Zero-rate segments model outages.
pub fn gen_step(levels: &[(f64, Micros)]) -> Result<LinkTrace, TraceError> {
    let mut opportunities = Vec::new();
    let mut credit = 0.0_f64;
    let mut t_ms = 0_u64;
    for &(rate, duration) in levels {
        check_rate(rate, true)?;
        let d_ms = duration.as_micros() / 1_000;
        if d_ms == 0 {
            return Err(TraceError::InvalidDuration);
        }
        let per_ms = rate * BYTES_PER_MS_PER_MBPS;
        for _ in 0..d_ms {
            t_ms += 1;
            credit += per_ms;
            while credit >= OPPORTUNITY_BYTES as f64 - 1e-6 {
                opportunities.push(t_ms);
                credit -= OPPORTUNITY_BYTES as f64;
            }
        }
    }
    if levels.is_empty() {
        return Err(TraceError::InvalidDuration);
    }
    if opportunities.is_empty() {
        return Err(TraceError::Empty);
    }
    let desc = levels
        .iter()
        .map(|(r, d)| format!("{r}Mbps/{}ms", d.as_micros() / 1_000))
        .collect::<Vec<_>>()
        .join(",");
    Ok(LinkTrace {
        opportunities,
        source: format!("step:{desc}"),
    })
}

/// Parameters of the synthetic cellular-like capacity process used by
/// [`gen_variable`].
#[derive(Clone, Debug, PartialEq)]
pub struct VariableParams {
    /// Geometric mean of the capacity, Mbit/s.
    pub median_mbps: f64,
    pub min_mbps: f64,
    pub max_mbps: f64,
    /// Capacity is held constant for this long before the next step.
    pub step: Micros,
    /// Std-dev of the log-rate innovation per step.
    pub volatility: f64,
    /// Fraction of the log-rate gap to the median closed per step.
    pub reversion: f64,
    /// Probability per step of entering a fade.
    pub fade_probability: f64,
    pub fade_mbps: f64,
    /// Maximum fade length in steps.
    pub fade_steps: u32,
}

impl Default for VariableParams {
    fn default() -> Self {
        VariableParams {
            median_mbps: 8.0,
            min_mbps: 1.0,
            max_mbps: 30.0,
            step: Micros::from_millis(200),
            volatility: 0.35,
            reversion: 0.15,
            fade_probability: 0.01,
            fade_mbps: 0.5,
            fade_steps: 3,
        }
    }
}

/// Mean-reverting log-normal random walk with occasional deep fades,
/// deterministic for a given seed.
pub fn gen_variable(seed: u64, duration: Micros, params: &VariableParams) -> Result<LinkTrace, TraceError> {
    check_rate(params.median_mbps, false)?;
    check_rate(params.min_mbps, false)?;
    check_rate(params.max_mbps, false)?;
    let steps = duration.as_micros() / params.step.as_micros().max(1);
    if steps == 0 {
        return Err(TraceError::InvalidDuration);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = params.median_mbps.ln();
    let mut x = mu;
    let mut fade_left = 0;
    let mut levels = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let z: f64 = rng.sample(StandardNormal);
        x += params.reversion * (mu - x) + params.volatility * z;
        let mut rate = x.exp().clamp(params.min_mbps, params.max_mbps);
        if fade_left == 0 && rng.gen_bool(params.fade_probability.clamp(0.0, 1.0)) {
            fade_left = rng.gen_range(1..=params.fade_steps.max(1));
        }
        if fade_left > 0 {
            rate = params.fade_mbps;
            fade_left -= 1;
        }
        levels.push((rate, params.step));
    }
    let mut trace = gen_step(&levels)?;
    trace.source = format!("variable:seed={seed}");
    Ok(trace)
}
