//! Steady-state delay bounds for a single long-lived overlay flow.

use crate::Scalar;

/// Upper bound on the steady-state average RTT: `α (minrtt + 1 / (2 bw))`.
///
/// `minrtt` is in seconds and `bw` in packets per second; the result is in
/// seconds. Returns `None` when `alpha < 1`, `minrtt <= 0` or `bw <= 0`.
pub fn predicted_rtt_bound<F: Scalar>(alpha: F, minrtt: F, bw: F) -> Option<F> {
    if alpha < F::one() || minrtt <= F::zero() || bw <= F::zero() {
        return None;
    }
    Some(alpha * (minrtt + F::one() / (F::lit(2.0) * bw)))
}

/// Looser form `1.5 α minrtt`, valid when `minrtt > 1 / bw`.
pub fn relaxed_rtt_bound<F: Scalar>(alpha: F, minrtt: F) -> Option<F> {
    if alpha < F::one() || minrtt <= F::zero() {
        return None;
    }
    Some(F::lit(1.5) * alpha * minrtt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bound_examples() {
        assert_relative_eq!(
            predicted_rtt_bound(2.0, 0.020, 2500.0).unwrap(),
            0.0404,
            epsilon = 1e-12
        );
        assert_relative_eq!(relaxed_rtt_bound(2.0, 0.020).unwrap(), 0.060, epsilon = 1e-12);
        assert_relative_eq!(
            predicted_rtt_bound(1.0, 0.020, 2500.0).unwrap(),
            0.020 + 1.0 / 5000.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rejects_out_of_domain() {
        assert_eq!(predicted_rtt_bound(0.5, 0.02, 100.0), None);
        assert_eq!(predicted_rtt_bound(2.0, 0.0, 100.0), None);
        assert_eq!(predicted_rtt_bound(2.0, 0.02, 0.0), None);
        assert_eq!(relaxed_rtt_bound(2.0_f32, -1.0), None);
    }

    #[test]
    fn relaxed_dominates_when_pipe_exceeds_one_packet() {
        // minrtt > 1/bw  =>  α(minrtt + 1/2bw) < 1.5 α minrtt
        let tight: f64 = predicted_rtt_bound(3.0, 0.02, 1000.0).unwrap();
        let relaxed: f64 = relaxed_rtt_bound(3.0, 0.02).unwrap();
        assert!(tight < relaxed);
    }
}
