//! Congestion-control engine.
//!
//! [`FlowState`] owns the loss-based window of one connection and, when the
//! flow runs C2TCP, the overlay that refines that window from RTT samples.
//! All methods are synchronous and deterministic; a `FlowState` is `Send` so
//! whole simulations can move between threads, but it is never shared.

mod analysis;
mod c2tcp;
mod loss;

pub use analysis::{predicted_rtt_bound, relaxed_rtt_bound};
pub use c2tcp::{
    tuned_alpha, C2tcpConfig, C2tcpState, Condition, Detection, MAX_ALPHA, MIN_ALPHA,
    TUNING_CYCLE,
};
pub use loss::{
    cubic_k, cubic_window, CubicState, Flavor, LossBasedState, LossKind, Phase, CUBIC_BETA,
    CUBIC_C, MIN_SSTHRESH,
};

use thiserror::Error;

use crate::{Micros, Scalar};

pub const DEFAULT_MSS: u32 = 1500;
pub const DEFAULT_INITIAL_CWND: f64 = 10.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CcError {
    #[error("rtt sample must be positive")]
    NonPositiveRtt,
    #[error("ack at {now} precedes previous ack at {previous}")]
    TimeWentBackwards { previous: Micros, now: Micros },
}

/// Timing information echoed by one acknowledgement.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AckSample {
    pub rtt: Micros,
    pub now: Micros,
    pub acked_bytes: u64,
}

/// Outcome of [`FlowState::on_ack`].
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ConditionReport<F> {
    /// Detector output; `None` for plain loss-based flows.
    pub detection: Option<Detection<F>>,
    /// Whether the action enforcer ran for this ack.
    pub enforced: bool,
}

impl<F> ConditionReport<F> {
    pub fn condition(&self) -> Option<Condition> {
        self.detection.as_ref().map(|d| d.condition)
    }

    pub fn fired(&self) -> Option<Condition> {
        self.detection.as_ref().and_then(|d| d.fired)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<F> {
    loss: LossBasedState<F>,
    overlay: Option<C2tcpState<F>>,
    mss: u32,
    inflight: u32,
    last_ack_at: Option<Micros>,
}

impl<F: Scalar> FlowState<F> {
    pub fn loss_based(flavor: Flavor) -> Self {
        FlowState {
            loss: LossBasedState::new(flavor, F::lit(DEFAULT_INITIAL_CWND)),
            overlay: None,
            mss: DEFAULT_MSS,
            inflight: 0,
            last_ack_at: None,
        }
    }

    pub fn c2tcp(flavor: Flavor, config: C2tcpConfig<F>) -> Self {
        FlowState {
            overlay: Some(C2tcpState::new(config)),
            ..Self::loss_based(flavor)
        }
    }

    pub fn with_initial_cwnd(mut self, cwnd: F) -> Self {
        self.loss.cwnd = cwnd.max(F::one());
        self
    }

    pub fn with_mss(mut self, mss: u32) -> Self {
        self.mss = mss.max(1);
        self
    }

    pub fn cwnd(&self) -> F {
        self.loss.cwnd
    }

    pub fn ssthresh(&self) -> F {
        self.loss.ssthresh
    }

    pub fn phase(&self) -> Phase {
        self.loss.phase
    }

    pub fn flavor(&self) -> Flavor {
        self.loss.flavor
    }

    pub fn loss_state(&self) -> &LossBasedState<F> {
        &self.loss
    }

    /// Direct access for drivers and tests that need to pin window variables.
    pub fn loss_state_mut(&mut self) -> &mut LossBasedState<F> {
        &mut self.loss
    }

    pub fn c2tcp_state(&self) -> Option<&C2tcpState<F>> {
        self.overlay.as_ref()
    }

    pub fn c2tcp_state_mut(&mut self) -> Option<&mut C2tcpState<F>> {
        self.overlay.as_mut()
    }

    pub fn inflight(&self) -> u32 {
        self.inflight
    }

    /// Packets currently in the network, as seen by the sender.
    pub fn set_inflight(&mut self, inflight: u32) {
        self.inflight = inflight;
    }

    /// Processes one acknowledgement: loss-based growth first, then the
    /// overlay's condition detector, then the action enforcer on Good acks and
    /// at the start of every Bad condition.
    pub fn on_ack(&mut self, sample: &AckSample) -> Result<ConditionReport<F>, CcError> {
        if sample.rtt == Micros::ZERO {
            return Err(CcError::NonPositiveRtt);
        }
        if let Some(previous) = self.last_ack_at {
            if sample.now < previous {
                return Err(CcError::TimeWentBackwards {
                    previous,
                    now: sample.now,
                });
            }
        }
        self.last_ack_at = Some(sample.now);
        self.loss_based_on_ack(sample);

        let Some(overlay) = self.overlay.as_mut() else {
            return Ok(ConditionReport {
                detection: None,
                enforced: false,
            });
        };
        let rtt = sample.rtt.to_scalar::<F>();
        let detection = overlay.detect(rtt, sample.now);
        let enforced = matches!(detection.fired, Some(Condition::Good | Condition::Bad));
        if enforced {
            self.action_enforcer(detection.condition, rtt, detection.setpoint);
        }
        Ok(ConditionReport {
            detection: Some(detection),
            enforced,
        })
    }

    /// Applies the overlay's window action. `rtt` and `setpoint` share a unit.
    pub fn action_enforcer(&mut self, condition: Condition, rtt: F, setpoint: F) {
        match condition {
            Condition::Good => {
                let cwnd = self.loss.cwnd;
                self.loss.cwnd = cwnd + setpoint / rtt / cwnd;
            }
            Condition::Normal => {}
            Condition::Bad => {
                self.loss.ssthresh = self.recalc_ssthresh();
                self.loss.cwnd = F::one();
                self.loss.phase = Phase::SlowStart;
            }
        }
    }

    /// End of a tuning cycle. No-op for loss-based flows.
    pub fn tuner_tick(&mut self, _now: Micros) {
        if let Some(overlay) = self.overlay.as_mut() {
            overlay.tune();
        }
    }

    pub fn loss_based_on_ack(&mut self, sample: &AckSample) {
        let acked = sample.acked_bytes.div_ceil(u64::from(self.mss));
        self.loss.grow(acked, sample.rtt, sample.now);
    }

    pub fn recalc_ssthresh(&mut self) -> F {
        self.loss.recalc_ssthresh(self.inflight)
    }

    pub fn on_loss(&mut self, kind: LossKind) {
        self.loss.on_loss(kind, self.inflight);
    }

    /// Called once the sender has recovered every loss of the episode.
    pub fn exit_recovery(&mut self) {
        self.loss.exit_recovery();
    }

    pub fn cwnd_allows_send(&self, inflight: u32) -> bool {
        self.loss.cwnd.floor() > F::from_u32(inflight).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ms(v: u64) -> Micros {
        Micros::from_millis(v)
    }

    fn ack(rtt_ms: u64, now_ms: u64) -> AckSample {
        AckSample {
            rtt: ms(rtt_ms),
            now: ms(now_ms),
            acked_bytes: 1500,
        }
    }

    fn c2(alpha: f64) -> FlowState<f64> {
        FlowState::c2tcp(
            Flavor::NewReno,
            C2tcpConfig {
                target: ms(50),
                initial_alpha: Some(alpha),
            },
        )
    }

    #[test]
    fn rejects_bad_samples() {
        let mut f = c2(2.0);
        let zero = AckSample {
            rtt: Micros::ZERO,
            now: ms(1),
            acked_bytes: 1500,
        };
        assert_eq!(f.on_ack(&zero), Err(CcError::NonPositiveRtt));
        f.on_ack(&ack(20, 10)).unwrap();
        assert!(matches!(
            f.on_ack(&ack(20, 9)),
            Err(CcError::TimeWentBackwards { .. })
        ));
    }

    #[test]
    fn enforcer_only_on_good_and_bad_starts() {
        let mut f = c2(2.0);
        assert!(f.on_ack(&ack(20, 20)).unwrap().enforced);
        let r = f.on_ack(&ack(50, 100)).unwrap();
        assert_eq!((r.fired(), r.enforced), (Some(Condition::Normal), false));
        let r = f.on_ack(&ack(50, 120)).unwrap();
        assert_eq!((r.condition(), r.enforced), (Some(Condition::Normal), false));
        f.set_inflight(47);
        let r = f.on_ack(&ack(50, 141)).unwrap();
        assert_eq!((r.fired(), r.enforced), (Some(Condition::Bad), true));
        assert_eq!(f.cwnd(), 1.0);
        assert_eq!(f.phase(), Phase::SlowStart);
        // Bad persists without re-enforcing until the shortened deadline.
        let r = f.on_ack(&ack(50, 150)).unwrap();
        assert_eq!((r.condition(), r.enforced), (Some(Condition::Bad), false));
        assert_eq!(f.cwnd(), 2.0);
    }

    #[test]
    fn good_boost_example() {
        let mut f = c2(2.0);
        f.loss_state_mut().cwnd = 10.0;
        f.action_enforcer(Condition::Good, 50.0, 40.0);
        assert_relative_eq!(f.cwnd(), 10.08, epsilon = 1e-12);

        f.loss_state_mut().cwnd = 1.0;
        f.action_enforcer(Condition::Good, 40.0, 40.0);
        assert_eq!(f.cwnd(), 2.0);
    }

    #[test]
    fn bad_example_newreno() {
        let mut f = c2(2.0);
        f.loss_state_mut().cwnd = 47.0;
        f.loss_state_mut().phase = Phase::CongestionAvoidance;
        f.set_inflight(47);
        f.action_enforcer(Condition::Bad, 50.0, 40.0);
        assert_eq!(f.ssthresh(), 23.5);
        assert_eq!(f.cwnd(), 1.0);
        assert_eq!(f.phase(), Phase::SlowStart);
    }

    #[test]
    fn normal_is_a_no_op() {
        let mut f = c2(2.0);
        let before = f.clone();
        f.action_enforcer(Condition::Normal, 50.0, 40.0);
        assert_eq!(f, before);
    }

    #[test]
    fn on_loss_examples() {
        let mut f = FlowState::<f64>::loss_based(Flavor::NewReno).with_initial_cwnd(40.0);
        f.set_inflight(40);
        f.on_loss(LossKind::TripleDupAck);
        assert_eq!((f.ssthresh(), f.cwnd(), f.phase()), (20.0, 20.0, Phase::Recovery));

        let mut f = FlowState::<f64>::loss_based(Flavor::NewReno).with_initial_cwnd(40.0);
        f.set_inflight(40);
        f.on_loss(LossKind::Timeout);
        assert_eq!((f.cwnd(), f.phase()), (1.0, Phase::SlowStart));

        let mut f = FlowState::<f64>::loss_based(Flavor::Cubic).with_initial_cwnd(100.0);
        f.on_loss(LossKind::TripleDupAck);
        assert_relative_eq!(f.cwnd(), 70.0, epsilon = 1e-9);
        assert_relative_eq!(f.loss_state().cubic.w_max, 100.0);
    }

    #[test]
    fn send_gate_uses_floor() {
        let mut f = FlowState::<f64>::loss_based(Flavor::NewReno).with_initial_cwnd(1.0);
        assert!(!f.cwnd_allows_send(120));
        assert!(f.cwnd_allows_send(0));
        f.loss_state_mut().cwnd = 10.9;
        assert!(!f.cwnd_allows_send(10));
        assert!(f.cwnd_allows_send(9));
    }

    #[test]
    fn tuner_tick_ignores_loss_based_flows() {
        let mut f = FlowState::<f64>::loss_based(Flavor::Cubic);
        let before = f.clone();
        f.tuner_tick(ms(500));
        assert_eq!(f, before);
    }

    #[test]
    fn flow_state_is_send() {
        fn assert_send<T: Send>() {}
        assert_send::<FlowState<f64>>();
        assert_send::<FlowState<f32>>();
    }
}
