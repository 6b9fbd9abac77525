//! Delay-controlling overlay: condition detector, action enforcer and tuner.
//!
//! The detector is timer-free. It keeps only the global minimum RTT, the
//! deadline `next_time` and a consecutive-backoff counter `N`, yet labels
//! every ack as if it tracked the minimum RTT over a sliding window:
//!
//! * Good: `rtt < Setpoint`.
//! * Normal: the first ack at or above `Setpoint` after a Good one; opens a
//!   window of length `Interval`.
//! * Bad: an ack that arrives after `next_time` with no Good ack in between.
//!   The next window is shortened to `Interval / sqrt(N)`.

use serde::{Deserialize, Serialize};

use crate::{Micros, Scalar};

pub const MIN_ALPHA: f64 = 1.0;
pub const MAX_ALPHA: f64 = 10.0;
/// Length of one tuning cycle.
pub const TUNING_CYCLE: Micros = Micros::from_millis(500);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Good,
    Normal,
    Bad,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct C2tcpConfig<F> {
    /// Desired average end-to-end delay.
    pub target: Micros,
    /// Fixed starting α. `None` derives it from the first RTT sample as
    /// `clamp(target / rtt, 1, 10)`.
    pub initial_alpha: Option<F>,
}

impl<F> C2tcpConfig<F> {
    pub fn with_target(target: Micros) -> Self {
        C2tcpConfig {
            target,
            initial_alpha: None,
        }
    }
}

/// Overlay state. Durations are kept as scalar microseconds; deadlines as
/// integer [`Micros`].
#[derive(Clone, Debug, PartialEq)]
pub struct C2tcpState<F> {
    pub(crate) minrtt: F,
    pub(crate) alpha: F,
    pub(crate) setpoint: F,
    pub(crate) interval: F,
    pub(crate) next_time: Micros,
    pub(crate) first_time: bool,
    pub(crate) n_backoffs: u32,
    pub(crate) condition: Option<Condition>,
    pub(crate) target: Micros,
    pub(crate) cycle_rtt_sum: F,
    pub(crate) cycle_rtt_count: u64,
    alpha_pending: bool,
    last_cycle_avg: Option<F>,
}

/// What the detector did with one ack.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Detection<F> {
    /// Condition after this ack (persists when no branch fires).
    pub condition: Condition,
    /// Branch of the detector that fired on this ack, if any.
    pub fired: Option<Condition>,
    pub setpoint: F,
}

impl<F: Scalar> C2tcpState<F> {
    pub fn new(config: C2tcpConfig<F>) -> Self {
        let (alpha, pending) = match config.initial_alpha {
            Some(a) => (clamp_alpha(a), false),
            None => (F::one(), true),
        };
        C2tcpState {
            minrtt: F::infinity(),
            alpha,
            setpoint: F::infinity(),
            interval: F::zero(),
            next_time: Micros::ZERO,
            first_time: true,
            n_backoffs: 1,
            condition: None,
            target: config.target,
            cycle_rtt_sum: F::zero(),
            cycle_rtt_count: 0,
            alpha_pending: pending,
            last_cycle_avg: None,
        }
    }

    /// Global minimum RTT in microseconds, `+inf` before the first sample.
    pub fn minrtt(&self) -> F {
        self.minrtt
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn setpoint(&self) -> F {
        self.setpoint
    }

    pub fn interval(&self) -> F {
        self.interval
    }

    pub fn next_time(&self) -> Micros {
        self.next_time
    }

    pub fn first_time(&self) -> bool {
        self.first_time
    }

    pub fn n_backoffs(&self) -> u32 {
        self.n_backoffs
    }

    pub fn condition(&self) -> Option<Condition> {
        self.condition
    }

    pub fn target(&self) -> Micros {
        self.target
    }

    /// Changes the delay target, as an application would through a socket option.
    pub fn set_target(&mut self, target: Micros) {
        self.target = target;
    }

    /// Average RTT of the last completed tuning cycle that had samples.
    pub fn last_cycle_avg(&self) -> Option<F> {
        self.last_cycle_avg
    }

    /// Runs the detector for one ack. Returns whether the enforcer must act.
    pub(crate) fn detect(&mut self, rtt_us: F, now: Micros) -> Detection<F> {
        if self.alpha_pending {
            let target = self.target.to_scalar::<F>();
            self.alpha = clamp_alpha(target / rtt_us);
            self.alpha_pending = false;
        }
        let first_sample = self.minrtt.is_infinite();
        if rtt_us < self.minrtt {
            self.minrtt = rtt_us;
        }
        self.setpoint = self.alpha * self.minrtt;
        if first_sample {
            self.interval = self.setpoint;
        }
        self.cycle_rtt_sum += rtt_us;
        self.cycle_rtt_count += 1;

        let fired = if rtt_us < self.setpoint {
            self.interval = self.setpoint;
            self.condition = Some(Condition::Good);
            self.first_time = true;
            self.n_backoffs = 1;
            Some(Condition::Good)
        } else if self.first_time {
            self.condition = Some(Condition::Normal);
            self.next_time = now + Micros::from_scalar(self.interval);
            self.first_time = false;
            Some(Condition::Normal)
        } else if now > self.next_time {
            self.condition = Some(Condition::Bad);
            let n = F::from_u32(self.n_backoffs).unwrap();
            self.next_time = now + Micros::from_scalar(self.interval / n.sqrt());
            self.n_backoffs += 1;
            Some(Condition::Bad)
        } else {
            None
        };
        Detection {
            condition: self.condition.expect("condition set on first ack"),
            fired,
            setpoint: self.setpoint,
        }
    }

    /// End of a tuning cycle: steer α toward the delay target.
    pub(crate) fn tune(&mut self) {
        if self.cycle_rtt_count == 0 {
            return;
        }
        let avg = self.cycle_rtt_sum / F::from_u64(self.cycle_rtt_count).unwrap();
        self.cycle_rtt_sum = F::zero();
        self.cycle_rtt_count = 0;
        self.last_cycle_avg = Some(avg);
        self.alpha = tuned_alpha(self.alpha, avg, self.target.to_scalar());
    }
}

fn clamp_alpha<F: Scalar>(a: F) -> F {
    a.max(F::lit(MIN_ALPHA)).min(F::lit(MAX_ALPHA))
}

/// One tuner update of α given the cycle's average RTT and the target
/// (both in the same time unit).
pub fn tuned_alpha<F: Scalar>(alpha: F, avg_rtt: F, target: F) -> F {
    let two = F::lit(2.0);
    let mut alpha = alpha;
    if avg_rtt < target {
        alpha += (target - avg_rtt) / (two * avg_rtt);
        let max = F::lit(MAX_ALPHA);
        if max <= alpha {
            alpha = max;
        }
    } else if target < avg_rtt {
        alpha -= two * (avg_rtt - target) / target;
        let min = F::lit(MIN_ALPHA);
        if alpha <= min {
            alpha = min;
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ms(v: u64) -> Micros {
        Micros::from_millis(v)
    }

    fn state(alpha: f64) -> C2tcpState<f64> {
        C2tcpState::new(C2tcpConfig {
            target: ms(50),
            initial_alpha: Some(alpha),
        })
    }

    #[test]
    fn first_ack_is_good() {
        let mut s = state(2.0);
        let d = s.detect(20_000.0, ms(20));
        assert_eq!(d.fired, Some(Condition::Good));
        assert_eq!(s.minrtt, 20_000.0);
        assert_eq!(s.setpoint, 40_000.0);
        assert_eq!(s.interval, 40_000.0);
        assert_eq!(s.n_backoffs, 1);
    }

    #[test]
    fn normal_then_bad_then_bad_again() {
        let mut s = state(2.0);
        s.detect(20_000.0, ms(20));
        let d = s.detect(50_000.0, ms(100));
        assert_eq!(d.fired, Some(Condition::Normal));
        assert_eq!(s.next_time, ms(140));
        assert!(!s.first_time);

        let d = s.detect(50_000.0, ms(120));
        assert_eq!((d.fired, d.condition), (None, Condition::Normal));

        let d = s.detect(50_000.0, ms(141));
        assert_eq!(d.fired, Some(Condition::Bad));
        assert_eq!(s.next_time, ms(181));
        assert_eq!(s.n_backoffs, 2);

        let d = s.detect(50_000.0, ms(182));
        assert_eq!(d.fired, Some(Condition::Bad));
        // 182 ms + 40 ms / sqrt(2) = 210.284 ms
        assert_eq!(s.next_time, Micros(210_284));
        assert_eq!(s.n_backoffs, 3);
    }

    #[test]
    fn rtt_equal_to_setpoint_is_not_good() {
        let mut s = state(2.0);
        s.detect(20_000.0, ms(20));
        let d = s.detect(40_000.0, ms(30));
        assert_eq!(d.fired, Some(Condition::Normal));
    }

    #[test]
    fn good_resets_backoffs_and_interval() {
        let mut s = state(2.0);
        s.detect(20_000.0, ms(0));
        s.detect(50_000.0, ms(10));
        s.detect(50_000.0, ms(60));
        s.detect(50_000.0, ms(110));
        assert_eq!(s.n_backoffs, 3);
        s.alpha = 3.0;
        s.detect(30_000.0, ms(120));
        assert_eq!(s.n_backoffs, 1);
        assert_eq!(s.interval, 60_000.0);
        assert!(s.first_time);
    }

    #[test]
    fn initial_alpha_from_target() {
        let mut s = C2tcpState::<f64>::new(C2tcpConfig::with_target(ms(50)));
        s.detect(20_000.0, ms(20));
        assert_relative_eq!(s.alpha, 2.5);
        let mut s = C2tcpState::<f64>::new(C2tcpConfig::with_target(ms(500)));
        s.detect(20_000.0, ms(20));
        assert_eq!(s.alpha, 10.0);
        let mut s = C2tcpState::<f64>::new(C2tcpConfig::with_target(ms(10)));
        s.detect(20_000.0, ms(20));
        assert_eq!(s.alpha, 1.0);
    }

    #[test]
    fn tuner_examples() {
        assert_relative_eq!(tuned_alpha(2.0, 40.0, 50.0), 2.125);
        assert_relative_eq!(tuned_alpha(3.0, 100.0, 50.0), 1.0);
        assert_eq!(tuned_alpha(2.0, 50.0, 50.0), 2.0);
        assert_eq!(tuned_alpha(9.9, 1.0, 50.0), 10.0);
        assert_eq!(tuned_alpha(1.2, 500.0, 50.0), 1.0);
    }

    #[test]
    fn tune_without_samples_keeps_alpha() {
        let mut s = state(2.0);
        s.tune();
        assert_eq!(s.alpha, 2.0);
        assert_eq!(s.last_cycle_avg, None);
    }

    #[test]
    fn tune_averages_cycle() {
        let mut s = state(2.0);
        s.detect(30_000.0, ms(1));
        s.detect(50_000.0, ms(2));
        s.tune();
        assert_eq!(s.last_cycle_avg, Some(40_000.0));
        assert_relative_eq!(s.alpha, 2.125);
        assert_eq!(s.cycle_rtt_count, 0);
    }

    #[test]
    fn works_in_single_precision() {
        let mut s = C2tcpState::<f32>::new(C2tcpConfig {
            target: ms(50),
            initial_alpha: Some(2.0),
        });
        s.detect(20_000.0, ms(20));
        s.detect(50_000.0, ms(100));
        s.detect(50_000.0, ms(141));
        s.detect(50_000.0, ms(182));
        assert_eq!(s.next_time, Micros(210_284));
    }
}
