//! Declarative experiment description, stored as TOML.
//!
//! ```toml
//! schema_version = 1
//! name = "city_walk"
//! duration_s = 60.0
//!
//! [link]
//! buffer_bytes = 150000
//! base_rtt_ms = 20.0
//!
//! [link.trace]
//! kind = "file"
//! path = "../traces/city_walk.trace"
//!
//! [[flows]]
//! cc = "c2tcp"
//! base = "cubic"
//! target_ms = 50.0
//! ```
//!
//! Relative trace paths resolve against the scenario file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cc::Flavor;
use crate::emu::{Aqm, CcSpec, CodelParams, EmuConfig, FlowSpec, QueueMode, Uplink, DEFAULT_BUFFER_BYTES};
use crate::trace::{gen_constant, gen_variable, LinkTrace, TraceError, VariableParams};
use crate::Micros;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub duration_s: f64,
    pub link: LinkSpec,
    pub flows: Vec<FlowEntry>,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceSource {
    File { path: PathBuf },
    Constant { mbps: f64, duration_s: f64 },
    Variable { seed: u64, duration_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub trace: TraceSource,
    /// Capacity multiplier applied to the trace.
    #[serde(default = "one")]
    pub scale: u32,
    #[serde(default = "default_buffer")]
    pub buffer_bytes: u64,
    #[serde(default = "default_rtt")]
    pub base_rtt_ms: f64,
    #[serde(default = "default_mtu")]
    pub mtu_bytes: u32,
    #[serde(default)]
    pub aqm: Aqm,
    #[serde(default = "default_codel_target")]
    pub codel_target_ms: f64,
    #[serde(default = "default_codel_interval")]
    pub codel_interval_ms: f64,
    #[serde(default)]
    pub queue_mode: QueueMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_trace: Option<TraceSource>,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcKind {
    NewReno,
    Cubic,
    C2tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEntry {
    pub cc: CcKind,
    /// Loss-based flavour under the overlay (c2tcp only, default cubic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Flavor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ms: Option<f64>,
    /// Fixed initial α (c2tcp only); derived from the first RTT otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_alpha: Option<f64>,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default = "yes")]
    pub packets: bool,
    #[serde(default = "yes")]
    pub timeseries: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            packets: true,
            timeseries: true,
        }
    }
}

fn one() -> u32 {
    1
}
fn yes() -> bool {
    true
}
fn default_buffer() -> u64 {
    DEFAULT_BUFFER_BYTES
}
fn default_rtt() -> f64 {
    20.0
}
fn default_mtu() -> u32 {
    1500
}
fn default_codel_target() -> f64 {
    5.0
}
fn default_codel_interval() -> f64 {
    100.0
}
fn default_warmup() -> f64 {
    2.0
}

pub const DEFAULT_TARGET_MS: f64 = 50.0;

impl LinkSpec {
    pub fn new(trace: TraceSource) -> Self {
        LinkSpec {
            trace,
            scale: 1,
            buffer_bytes: default_buffer(),
            base_rtt_ms: default_rtt(),
            mtu_bytes: default_mtu(),
            aqm: Aqm::DropTail,
            codel_target_ms: default_codel_target(),
            codel_interval_ms: default_codel_interval(),
            queue_mode: QueueMode::PerFlow,
            uplink_trace: None,
            warmup_s: default_warmup(),
        }
    }
}

impl FlowEntry {
    pub fn from_spec(cc: CcSpec) -> Self {
        let mut e = FlowEntry {
            cc: CcKind::NewReno,
            base: None,
            target_ms: None,
            initial_alpha: None,
            start_s: 0.0,
            stop_s: None,
        };
        match cc {
            CcSpec::LossBased(Flavor::NewReno) => {}
            CcSpec::LossBased(Flavor::Cubic) => e.cc = CcKind::Cubic,
            CcSpec::C2tcp {
                base,
                target,
                initial_alpha,
            } => {
                e.cc = CcKind::C2tcp;
                e.base = Some(base);
                e.target_ms = Some(target.as_millis_f64());
                e.initial_alpha = initial_alpha;
            }
        }
        e
    }

    pub fn cc_spec(&self) -> Result<CcSpec, ScenarioError> {
        if self.cc != CcKind::C2tcp && (self.base.is_some() || self.target_ms.is_some() || self.initial_alpha.is_some()) {
            return Err(invalid("base, target_ms and initial_alpha only apply to c2tcp flows"));
        }
        Ok(match self.cc {
            CcKind::NewReno => CcSpec::LossBased(Flavor::NewReno),
            CcKind::Cubic => CcSpec::LossBased(Flavor::Cubic),
            CcKind::C2tcp => {
                let target = self.target_ms.unwrap_or(DEFAULT_TARGET_MS);
                if !(target > 0.0 && target.is_finite()) {
                    return Err(invalid("c2tcp target_ms must be positive"));
                }
                if let Some(a) = self.initial_alpha {
                    if !(1.0..=10.0).contains(&a) {
                        return Err(invalid("initial_alpha must lie in [1, 10]"));
                    }
                }
                CcSpec::C2tcp {
                    base: self.base.unwrap_or(Flavor::Cubic),
                    target: Micros::from_millis_f64(target),
                    initial_alpha: self.initial_alpha,
                }
            }
        })
    }
}

fn positive(v: f64, what: &str) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be positive")))
    }
}

impl TraceSource {
    fn validate(&self) -> Result<(), ScenarioError> {
        match self {
            TraceSource::File { .. } => Ok(()),
            TraceSource::Constant { mbps, duration_s } => {
                positive(*mbps, "trace mbps")?;
                positive(*duration_s, "trace duration_s")
            }
            TraceSource::Variable { duration_s, .. } => positive(*duration_s, "trace duration_s"),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<LinkTrace, ScenarioError> {
        Ok(match self {
            TraceSource::File { path } => LinkTrace::load(base_dir.join(path))?,
            TraceSource::Constant { mbps, duration_s } => gen_constant(*mbps, Micros::from_secs_f64(*duration_s))?,
            TraceSource::Variable { seed, duration_s } => {
                gen_variable(*seed, Micros::from_secs_f64(*duration_s), &VariableParams::default())?
            }
        })
    }
}

impl Scenario {
    /// Minimal scenario with the default link and one flow.
    pub fn new(name: impl Into<String>, trace: TraceSource, duration_s: f64, flows: Vec<FlowEntry>) -> Self {
        Scenario {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            duration_s,
            link: LinkSpec::new(trace),
            flows,
            outputs: Outputs::default(),
        }
    }

    /// Mobile-edge preset: 4 ms base RTT, 10 ms Target and three times the
    /// trace capacity.
    pub fn mobile_edge(name: impl Into<String>, trace: TraceSource, duration_s: f64) -> Self {
        let mut flow = FlowEntry::from_spec(CcSpec::c2tcp(10, Flavor::Cubic));
        flow.target_ms = Some(10.0);
        let mut s = Scenario::new(name, trace, duration_s, vec![flow]);
        s.link.base_rtt_ms = 4.0;
        s.link.scale = 3;
        s
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Schema(self.schema_version));
        }
        positive(self.duration_s, "duration_s")?;
        if self.flows.is_empty() {
            return Err(invalid("at least one flow is required"));
        }
        let l = &self.link;
        l.trace.validate()?;
        if let Some(u) = &l.uplink_trace {
            u.validate()?;
        }
        if l.scale == 0 {
            return Err(invalid("scale must be at least 1"));
        }
        if l.mtu_bytes == 0 || l.buffer_bytes < u64::from(l.mtu_bytes) {
            return Err(invalid("buffer_bytes must hold at least one mtu-sized packet"));
        }
        positive(l.base_rtt_ms, "base_rtt_ms")?;
        positive(l.codel_target_ms, "codel_target_ms")?;
        positive(l.codel_interval_ms, "codel_interval_ms")?;
        if !(l.warmup_s >= 0.0 && l.warmup_s.is_finite()) {
            return Err(invalid("warmup_s must be non-negative"));
        }
        for (i, f) in self.flows.iter().enumerate() {
            f.cc_spec().map_err(|e| invalid(format!("flow {i}: {e}")))?;
            if !(f.start_s >= 0.0 && f.start_s < self.duration_s) {
                return Err(invalid(format!("flow {i}: start_s must lie in [0, duration_s)")));
            }
            if let Some(stop) = f.stop_s {
                if !(stop > f.start_s && stop <= self.duration_s) {
                    return Err(invalid(format!(
                        "flow {i}: stop_s must satisfy start_s < stop_s <= duration_s"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> Micros {
        Micros::from_secs_f64(self.duration_s)
    }

    pub fn flow_specs(&self) -> Result<Vec<FlowSpec>, ScenarioError> {
        self.flows
            .iter()
            .map(|f| {
                Ok(FlowSpec {
                    cc: f.cc_spec()?,
                    start_at: Micros::from_secs_f64(f.start_s),
                    stop_at: f.stop_s.map(Micros::from_secs_f64),
                })
            })
            .collect()
    }

    /// Loads traces (relative to `base_dir`) and builds the emulator input.
    pub fn emu_config(&self, base_dir: &Path) -> Result<EmuConfig, ScenarioError> {
        self.validate()?;
        let l = &self.link;
        let mut trace = l.trace.load(base_dir)?;
        if l.scale > 1 {
            trace = trace.scale(l.scale)?;
        }
        let uplink = match &l.uplink_trace {
            None => Uplink::FixedDelay,
            Some(src) => Uplink::Trace(src.load(base_dir)?),
        };
        Ok(EmuConfig {
            trace,
            buffer_bytes: l.buffer_bytes,
            base_rtt: Micros::from_millis_f64(l.base_rtt_ms),
            mtu_bytes: l.mtu_bytes,
            aqm: l.aqm,
            codel: CodelParams {
                target: Micros::from_millis_f64(l.codel_target_ms),
                interval: Micros::from_millis_f64(l.codel_interval_ms),
            },
            uplink,
            queue_mode: l.queue_mode,
            warmup: Micros::from_secs_f64(l.warmup_s),
        })
    }

    /// Same scenario with every c2tcp flow steered to `target_ms`.
    pub fn with_target(&self, target_ms: f64) -> Self {
        let mut s = self.clone();
        for f in s.flows.iter_mut().filter(|f| f.cc == CcKind::C2tcp) {
            f.target_ms = Some(target_ms);
        }
        s
    }

    /// Same scenario with every c2tcp flow replaced by its loss-based base.
    pub fn without_overlay(&self) -> Self {
        let mut s = self.clone();
        for f in s.flows.iter_mut().filter(|f| f.cc == CcKind::C2tcp) {
            f.cc = match f.base.unwrap_or(Flavor::Cubic) {
                Flavor::NewReno => CcKind::NewReno,
                Flavor::Cubic => CcKind::Cubic,
            };
            f.base = None;
            f.target_ms = None;
            f.initial_alpha = None;
        }
        s
    }

    pub fn has_c2tcp(&self) -> bool {
        self.flows.iter().any(|f| f.cc == CcKind::C2tcp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: &str = r#"
schema_version = 1
name = "demo"
duration_s = 10.0

[link]
buffer_bytes = 60000
queue_mode = "shared"

[link.trace]
kind = "constant"
mbps = 24.0
duration_s = 1.0

[[flows]]
cc = "c2tcp"
base = "newreno"
target_ms = 80.0

[[flows]]
cc = "newreno"
start_s = 3.0
"#;

    #[test]
    fn parses_example_with_defaults() {
        let s = Scenario::parse(EXAMPLE).unwrap();
        assert_eq!(s.link.base_rtt_ms, 20.0);
        assert_eq!(s.link.aqm, Aqm::DropTail);
        assert_eq!(s.link.queue_mode, QueueMode::Shared);
        let flows = s.flow_specs().unwrap();
        assert_eq!(flows[0].cc, CcSpec::c2tcp(80, Flavor::NewReno));
        assert_eq!(flows[1].start_at, Micros::from_secs(3));
        let cfg = s.emu_config(Path::new(".")).unwrap();
        assert_eq!(cfg.trace.len(), 2000);
        assert_eq!(cfg.buffer_bytes, 60_000);
    }

    #[test]
    fn rejects_invalid() {
        let bad = EXAMPLE.replace("start_s = 3.0", "start_s = 3.0\nstop_s = 2.0");
        assert!(matches!(Scenario::parse(&bad), Err(ScenarioError::Invalid(_))));
        let bad = EXAMPLE.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(Scenario::parse(&bad), Err(ScenarioError::Schema(7))));
        let bad = EXAMPLE.replace("target_ms = 80.0", "target_ms = 0.0");
        assert!(Scenario::parse(&bad).is_err());
        let bad = EXAMPLE.replace("cc = \"newreno\"", "cc = \"newreno\"\ntarget_ms = 5.0");
        assert!(Scenario::parse(&bad).is_err());
        let bad = EXAMPLE.replace("buffer_bytes = 60000", "buffer_bytes = 100");
        assert!(Scenario::parse(&bad).is_err());
        let bad = EXAMPLE.replace("queue_mode", "queue_mood");
        assert!(matches!(Scenario::parse(&bad), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn mobile_edge_preset() {
        let s = Scenario::mobile_edge("edge", TraceSource::Constant { mbps: 4.0, duration_s: 1.0 }, 5.0);
        let cfg = s.emu_config(Path::new(".")).unwrap();
        assert_eq!(cfg.base_rtt, Micros::from_millis(4));
        assert!((cfg.trace.average_mbps() - 12.0).abs() < 1e-9);
        assert_eq!(s.flow_specs().unwrap()[0].cc, CcSpec::c2tcp(10, Flavor::Cubic));
    }

    #[test]
    fn overlay_rewrites() {
        let s = Scenario::parse(EXAMPLE).unwrap();
        assert_eq!(s.with_target(30.0).flows[0].target_ms, Some(30.0));
        let plain = s.without_overlay();
        assert_eq!(plain.flows[0].cc, CcKind::NewReno);
        assert!(!plain.has_c2tcp());
    }

    fn arb_trace() -> impl Strategy<Value = TraceSource> {
        prop_oneof![
            "[a-z]{1,8}\\.trace".prop_map(|p| TraceSource::File { path: p.into() }),
            (0.1f64..100.0, 0.5f64..120.0).prop_map(|(mbps, duration_s)| TraceSource::Constant { mbps, duration_s }),
            (any::<u32>(), 0.5f64..120.0).prop_map(|(seed, duration_s)| TraceSource::Variable {
                seed: u64::from(seed),
                duration_s
            }),
        ]
    }

    fn arb_flow() -> impl Strategy<Value = FlowEntry> {
        (0u8..3, 1.0f64..200.0, prop::option::of(1.0f64..10.0), 0.0f64..5.0, any::<bool>()).prop_map(
            |(kind, target, alpha, start, base_newreno)| {
                let base = if base_newreno { Flavor::NewReno } else { Flavor::Cubic };
                let mut f = match kind {
                    0 => FlowEntry::from_spec(CcSpec::LossBased(Flavor::NewReno)),
                    1 => FlowEntry::from_spec(CcSpec::LossBased(Flavor::Cubic)),
                    _ => {
                        let mut f = FlowEntry::from_spec(CcSpec::c2tcp(1, base));
                        f.target_ms = Some(target);
                        f.initial_alpha = alpha;
                        f
                    }
                };
                f.start_s = start;
                f
            },
        )
    }

    proptest! {
        #[test]
        fn toml_round_trip(
            trace in arb_trace(),
            flows in prop::collection::vec(arb_flow(), 1..4),
            buffer in 1500u64..2_000_000,
            rtt in 1.0f64..200.0,
            codel in any::<bool>(),
            shared in any::<bool>(),
            uplink in prop::option::of(arb_trace()),
        ) {
            let mut s = Scenario::new("prop", trace, 10.0, flows);
            s.link.buffer_bytes = buffer;
            s.link.base_rtt_ms = rtt;
            s.link.aqm = if codel { Aqm::CoDel } else { Aqm::DropTail };
            s.link.queue_mode = if shared { QueueMode::Shared } else { QueueMode::PerFlow };
            s.link.uplink_trace = uplink;
            s.validate().unwrap();
            let text = s.to_toml().unwrap();
            let back = Scenario::parse(&text).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
