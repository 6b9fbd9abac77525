//! Loss-based window control: NewReno-style AIMD and Cubic.

use serde::{Deserialize, Serialize};

use crate::{Micros, Scalar};

/// Cubic scaling constant, packets / s³.
pub const CUBIC_C: f64 = 0.4;
/// Cubic multiplicative decrease factor.
pub const CUBIC_BETA: f64 = 0.7;
/// Floor applied to every recalculated slow-start threshold, in packets.
pub const MIN_SSTHRESH: f64 = 2.0;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    NewReno,
    Cubic,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::NewReno => "newreno",
            Flavor::Cubic => "cubic",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    SlowStart,
    CongestionAvoidance,
    Recovery,
}

/// How a loss was inferred by the sender.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Three duplicate acknowledgements: multiplicative decrease, fast recovery.
    TripleDupAck,
    /// Retransmission timeout: window collapses to one packet.
    Timeout,
}

/// `W(t) = C (t - K)^3 + W_max`, with `t` in seconds since the epoch start.
pub fn cubic_window<F: Scalar>(t_secs: F, k_secs: F, w_max: F) -> F {
    let d = t_secs - k_secs;
    F::lit(CUBIC_C) * d * d * d + w_max
}

/// Time for the cubic curve to climb from `cwnd` back to `w_max`.
pub fn cubic_k<F: Scalar>(w_max: F, cwnd: F) -> F {
    if cwnd >= w_max {
        F::zero()
    } else {
        ((w_max - cwnd) / F::lit(CUBIC_C)).cbrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubicState<F> {
    /// Window at the last reduction (after fast-convergence adjustment).
    pub w_max: F,
    pub epoch_start: Option<Micros>,
    pub k: F,
    pub origin: F,
    /// Reno-equivalent window for the TCP-friendly region.
    pub w_est: F,
}

impl<F: Scalar> Default for CubicState<F> {
    fn default() -> Self {
        CubicState {
            w_max: F::zero(),
            epoch_start: None,
            k: F::zero(),
            origin: F::zero(),
            w_est: F::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBasedState<F> {
    pub cwnd: F,
    pub ssthresh: F,
    pub phase: Phase,
    pub flavor: Flavor,
    pub cubic: CubicState<F>,
    min_rtt: Option<Micros>,
}

impl<F: Scalar> LossBasedState<F> {
    pub fn new(flavor: Flavor, initial_cwnd: F) -> Self {
        LossBasedState {
            cwnd: initial_cwnd.max(F::one()),
            ssthresh: F::infinity(),
            phase: Phase::SlowStart,
            flavor,
            cubic: CubicState::default(),
            min_rtt: None,
        }
    }

    /// Per-ack growth for `acked` newly acknowledged packets.
    pub(crate) fn grow(&mut self, acked: u64, rtt: Micros, now: Micros) {
        self.min_rtt = Some(self.min_rtt.map_or(rtt, |m| m.min(rtt)));
        for _ in 0..acked {
            match self.phase {
                Phase::Recovery => return,
                Phase::SlowStart => {
                    self.cwnd += F::one();
                    if self.cwnd >= self.ssthresh {
                        self.phase = Phase::CongestionAvoidance;
                        self.cubic.epoch_start = None;
                    }
                }
                Phase::CongestionAvoidance => match self.flavor {
                    Flavor::NewReno => self.cwnd += F::one() / self.cwnd,
                    Flavor::Cubic => self.cubic_step(now),
                },
            }
        }
    }

    fn cubic_step(&mut self, now: Micros) {
        let c = &mut self.cubic;
        if c.epoch_start.is_none() {
            c.epoch_start = Some(now);
            if self.cwnd < c.w_max {
                c.k = cubic_k(c.w_max, self.cwnd);
                c.origin = c.w_max;
            } else {
                c.k = F::zero();
                c.origin = self.cwnd;
            }
            c.w_est = self.cwnd;
        }
        let epoch = c.epoch_start.unwrap_or(now);
        let rtt = self.min_rtt.unwrap_or(Micros::ZERO);
        let t = (now.saturating_sub(epoch) + rtt).to_scalar::<F>() / F::lit(1e6);
        let target = cubic_window(t, c.k, c.origin);
        if target > self.cwnd {
            self.cwnd += (target - self.cwnd) / self.cwnd;
        } else {
            self.cwnd += F::lit(0.01) / self.cwnd;
        }
        // TCP-friendly region: never grow slower than an equivalent AIMD flow.
        let beta = F::lit(CUBIC_BETA);
        c.w_est += F::lit(3.0) * (F::one() - beta) / (F::one() + beta) / self.cwnd;
        if c.w_est > self.cwnd {
            self.cwnd = c.w_est;
        }
    }

    /// Threshold the flavour would pick after a congestion signal. Cubic also
    /// records the new `W_max` and restarts its epoch.
    pub(crate) fn recalc_ssthresh(&mut self, inflight: u32) -> F {
        let floor = F::lit(MIN_SSTHRESH);
        match self.flavor {
            Flavor::NewReno => (F::from_u32(inflight).unwrap() / F::lit(2.0)).max(floor),
            Flavor::Cubic => {
                let beta = F::lit(CUBIC_BETA);
                let c = &mut self.cubic;
                // Fast convergence: release bandwidth when W_max keeps shrinking.
                c.w_max = if self.cwnd < c.w_max {
                    self.cwnd * (F::one() + beta) / F::lit(2.0)
                } else {
                    self.cwnd
                };
                c.epoch_start = None;
                (self.cwnd * beta).max(floor)
            }
        }
    }

    pub(crate) fn on_loss(&mut self, kind: LossKind, inflight: u32) {
        let ssthresh = self.recalc_ssthresh(inflight);
        self.ssthresh = ssthresh;
        match kind {
            LossKind::TripleDupAck => {
                self.cwnd = ssthresh.max(F::one());
                self.phase = Phase::Recovery;
            }
            LossKind::Timeout => {
                self.cwnd = F::one();
                self.phase = Phase::SlowStart;
            }
        }
    }

    pub(crate) fn exit_recovery(&mut self) {
        if self.phase == Phase::Recovery {
            self.phase = Phase::CongestionAvoidance;
            self.cubic.epoch_start = None;
        }
    }
}
