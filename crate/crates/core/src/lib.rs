//! A trace-driven congestion-control laboratory.
//!
//! The crate bundles four pieces that are normally used together:
//!
//! * [`cc`]: loss-based TCP window control (NewReno and Cubic flavours) plus
//!   the C2TCP delay-controlling overlay (condition detector, action enforcer
//!   and α tuner).
//! * [`trace`]: Mahimahi-compatible bandwidth traces with parsing, serialization
//!   and synthetic generators.
//! * [`emu`]: a deterministic discrete-event emulator of a sender, a
//!   trace-driven bottleneck queue (drop-tail or CoDel) and a receiver.
//! * [`metrics`] and [`harness`]: the evaluation metrics and the experiment
//!   drivers behind the `c2lab` command-line tool.
//!
//! The congestion-control math is generic over the scalar type (see
//! [`Scalar`]); the aliases below fix it to `f64`, which is what the emulator
//! and the command-line tool use.

pub mod cc;
pub mod emu;
pub mod harness;
pub mod metrics;
pub mod scalar;
pub mod scenario;
pub mod time;
pub mod trace;

pub use scalar::Scalar;
pub use time::Micros;

/// Per-connection congestion state in double precision.
pub type FlowState = cc::FlowState<f64>;
/// Per-connection congestion state in single precision.
pub type FlowState32 = cc::FlowState<f32>;
/// C2TCP overlay state in double precision.
pub type C2tcpState = cc::C2tcpState<f64>;
/// Loss-based window state in double precision.
pub type LossBasedState = cc::LossBasedState<f64>;
/// Ack sample in double precision.
pub type AckSample = cc::AckSample;
/// Emulator result in double precision.
pub type RunReport = emu::RunReport;
