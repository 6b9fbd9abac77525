//! Discrete-event emulator: sender, trace-driven bottleneck, receiver.
//!
//! Data packets enter the bottleneck queue the moment they are sent, leave
//! it on trace delivery opportunities and reach the receiver half a base RTT
//! later. Every arrival produces a cumulative ack that echoes the
//! transmission it acknowledges; acks travel back over a fixed delay or,
//! optionally, their own trace-driven queue.
//!
//! Loss inference is dup-ack equivalent: the path is FIFO per flow, so once
//! three later transmissions have been acknowledged an unacknowledged one is
//! declared lost and queued for retransmission. A retransmission timer of
//! `max(2 srtt, 200 ms)` (with exponential backoff) covers tail losses.

mod event;
mod queue;

pub use event::EventQueue;
pub use queue::{BottleneckQueue, Codel, CodelParams, EnqueueOutcome, Packet};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cc::{self, C2tcpConfig, Condition, Flavor, FlowState, LossKind, DEFAULT_MSS, TUNING_CYCLE};
use crate::metrics::{self, PacketRecord, RunSummary, SummaryWindow};
use crate::trace::LinkTrace;
use crate::{Micros, Scalar};

/// Averages skip this much of every flow's lifetime.
pub const DEFAULT_WARMUP: Micros = Micros::from_secs(2);
pub const DEFAULT_BUFFER_BYTES: u64 = 150_000;
pub const DEFAULT_BASE_RTT: Micros = Micros::from_millis(20);

const DUP_THRESHOLD: u32 = 3;
const MIN_RTO: Micros = Micros::from_millis(200);
const INITIAL_RTO: Micros = Micros::from_secs(1);
const MAX_RTO: Micros = Micros::from_secs(60);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmuError {
    #[error("at least one flow is required")]
    NoFlows,
    #[error("run duration must be positive")]
    ZeroDuration,
    #[error("trace period is zero, so it cannot be looped")]
    DegenerateTrace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("congestion control rejected an ack: {0}")]
    Cc(#[from] cc::CcError),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aqm {
    #[default]
    DropTail,
    CoDel,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueMode {
    /// Each flow has its own queue and its own copy of the trace capacity.
    #[default]
    PerFlow,
    /// All flows share one queue and one trace.
    Shared,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Uplink {
    /// Lossless, unlimited-rate ack path.
    #[default]
    FixedDelay,
    /// Each ack consumes one opportunity of this trace before propagating.
    Trace(LinkTrace),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmuConfig {
    pub trace: LinkTrace,
    pub buffer_bytes: u64,
    /// Split evenly between the data and the ack direction.
    pub base_rtt: Micros,
    pub mtu_bytes: u32,
    pub aqm: Aqm,
    pub codel: CodelParams,
    pub uplink: Uplink,
    pub queue_mode: QueueMode,
    pub warmup: Micros,
}

impl EmuConfig {
    pub fn new(trace: LinkTrace) -> Self {
        EmuConfig {
            trace,
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            base_rtt: DEFAULT_BASE_RTT,
            mtu_bytes: DEFAULT_MSS,
            aqm: Aqm::DropTail,
            codel: CodelParams::default(),
            uplink: Uplink::FixedDelay,
            queue_mode: QueueMode::PerFlow,
            warmup: DEFAULT_WARMUP,
        }
    }

    pub fn validate(&self) -> Result<(), EmuError> {
        if self.trace.period_ms() == 0 {
            return Err(EmuError::DegenerateTrace);
        }
        if let Uplink::Trace(t) = &self.uplink {
            if t.period_ms() == 0 {
                return Err(EmuError::DegenerateTrace);
            }
        }
        if self.mtu_bytes == 0 {
            return Err(EmuError::InvalidConfig("mtu must be positive".into()));
        }
        if self.buffer_bytes < u64::from(self.mtu_bytes) {
            return Err(EmuError::InvalidConfig(format!(
                "buffer of {} bytes cannot hold one {}-byte packet",
                self.buffer_bytes, self.mtu_bytes
            )));
        }
        if self.base_rtt == Micros::ZERO {
            return Err(EmuError::InvalidConfig("base rtt must be positive".into()));
        }
        Ok(())
    }
}

/// Congestion control of one flow.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CcSpec {
    LossBased(Flavor),
    C2tcp {
        base: Flavor,
        target: Micros,
        initial_alpha: Option<f64>,
    },
}

impl CcSpec {
    pub fn c2tcp(target_ms: u64, base: Flavor) -> Self {
        CcSpec::C2tcp {
            base,
            target: Micros::from_millis(target_ms),
            initial_alpha: None,
        }
    }

    /// Short label such as `cubic` or `c2tcp:50:newreno`.
    pub fn label(&self) -> String {
        match self {
            CcSpec::LossBased(f) => f.name().to_string(),
            CcSpec::C2tcp { base, target, .. } => {
                format!("c2tcp:{}:{}", fmt_ms(*target), base.name())
            }
        }
    }

    fn build<F: Scalar>(&self, mss: u32) -> FlowState<F> {
        match *self {
            CcSpec::LossBased(flavor) => FlowState::loss_based(flavor),
            CcSpec::C2tcp {
                base,
                target,
                initial_alpha,
            } => FlowState::c2tcp(
                base,
                C2tcpConfig {
                    target,
                    initial_alpha: initial_alpha.map(F::lit),
                },
            ),
        }
        .with_mss(mss)
    }
}

fn fmt_ms(t: Micros) -> String {
    if t.as_micros() % 1_000 == 0 {
        (t.as_micros() / 1_000).to_string()
    } else {
        t.as_millis_f64().to_string()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub cc: CcSpec,
    pub start_at: Micros,
    /// Stops sending new packets at this time; runs to the end when `None`.
    pub stop_at: Option<Micros>,
}

impl FlowSpec {
    pub fn new(cc: CcSpec) -> Self {
        FlowSpec {
            cc,
            start_at: Micros::ZERO,
            stop_at: None,
        }
    }

    pub fn starting_at(mut self, t: Micros) -> Self {
        self.start_at = t;
        self
    }

    pub fn stopping_at(mut self, t: Micros) -> Self {
        self.stop_at = Some(t);
        self
    }
}

/// α after one tuning cycle.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub t_s: f64,
    pub alpha: f64,
    /// Average RTT of the finished cycle; `None` when it had no samples.
    pub avg_rtt_ms: Option<f64>,
}

/// Overlay state at the end of a run.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2tcpSnapshot {
    pub alpha: f64,
    pub minrtt_ms: f64,
    pub setpoint_ms: f64,
    pub target_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow_id: usize,
    pub scheme: String,
    pub start_at: Micros,
    pub stop_at: Micros,
    /// Transmissions, retransmissions included.
    pub sent: u64,
    pub retransmits: u64,
    /// Arrivals at the receiver, duplicates included.
    pub arrived: u64,
    pub duplicates: u64,
    /// Dropped by the bottleneck (full buffer or AQM).
    pub dropped: u64,
    /// Still queued or propagating when the run ended.
    pub in_network_at_end: u64,
    pub fast_recoveries: u64,
    pub timeouts: u64,
    pub bad_conditions: u64,
    pub final_cwnd: f64,
    pub c2tcp: Option<C2tcpSnapshot>,
    pub tuning: Vec<TuningPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub duration: Micros,
    pub warmup: Micros,
    pub queue_mode: QueueMode,
    pub mtu_bytes: u32,
    pub trace: LinkTrace,
    /// First delivery of every packet, in arrival order.
    pub records: Vec<PacketRecord>,
    pub flows: Vec<FlowReport>,
}

impl RunReport {
    pub fn flow_records(&self, flow_id: usize) -> impl Iterator<Item = &PacketRecord> {
        self.records.iter().filter(move |r| r.flow_id == flow_id)
    }

    /// Averaging window of a flow: its lifetime minus the warm-up.
    pub fn flow_window(&self, flow_id: usize) -> SummaryWindow {
        let f = &self.flows[flow_id];
        let end = f.stop_at.min(self.duration);
        SummaryWindow::new((f.start_at + self.warmup).min(end), end)
    }

    fn capacity_bytes(&self, window: SummaryWindow) -> u64 {
        self.trace.opportunities_between(window.start, window.end) * u64::from(self.mtu_bytes)
    }

    pub fn flow_summary(&self, flow_id: usize) -> RunSummary {
        self.flow_summary_in(flow_id, self.flow_window(flow_id))
    }

    pub fn flow_summary_in(&self, flow_id: usize, window: SummaryWindow) -> RunSummary {
        let records: Vec<PacketRecord> = self.flow_records(flow_id).copied().collect();
        let mut s = metrics::summarize(&records, window).unwrap_or_else(|_| RunSummary::empty(window));
        let f = &self.flows[flow_id];
        s.flow_id = Some(flow_id);
        s.scheme = f.scheme.clone();
        s.loss_count = f.dropped;
        let cap = self.capacity_bytes(window);
        s.utilization = (cap > 0).then(|| {
            let bytes = s.throughput_mbps * 1e6 / 8.0 * window.secs();
            (bytes / cap as f64).min(1.0)
        });
        s
    }

    /// All flows over `[warmup, duration)`.
    pub fn aggregate_summary(&self) -> RunSummary {
        let window = SummaryWindow::new(self.warmup.min(self.duration), self.duration);
        let mut s = metrics::summarize(&self.records, window).unwrap_or_else(|_| RunSummary::empty(window));
        s.scheme = self
            .flows
            .iter()
            .map(|f| f.scheme.as_str())
            .collect::<Vec<_>>()
            .join("+");
        s.loss_count = self.flows.iter().map(|f| f.dropped).sum();
        let links = match self.queue_mode {
            QueueMode::PerFlow => self.flows.len() as u64,
            QueueMode::Shared => 1,
        };
        let cap = self.capacity_bytes(window) * links;
        s.utilization = (cap > 0).then(|| {
            let bytes = s.throughput_mbps * 1e6 / 8.0 * window.secs();
            (bytes / cap as f64).min(1.0)
        });
        s
    }

    /// One summary per flow followed by the aggregate.
    pub fn summaries(&self) -> Vec<RunSummary> {
        let mut out: Vec<_> = (0..self.flows.len()).map(|i| self.flow_summary(i)).collect();
        out.push(self.aggregate_summary());
        out
    }
}

#[derive(Copy, Clone, Debug)]
struct Ack {
    flow_id: usize,
    cum_ack: u64,
    tx_id: u64,
    sent_at: Micros,
    record: Option<usize>,
}

#[derive(Debug)]
enum Event {
    FlowStart(usize),
    Opportunity(usize),
    DataArrival(Packet, Micros),
    AckOpportunity(usize),
    AckArrival(Ack),
    Rto(usize),
    Tune(usize),
}

struct Link {
    queue: BottleneckQueue,
    cursor: u64,
    pending: Option<u64>,
}

#[derive(Default)]
struct AckLink {
    queue: VecDeque<Ack>,
    cursor: u64,
    pending: Option<u64>,
}

#[derive(Copy, Clone)]
struct Outstanding {
    seq: u64,
    skips: u32,
}

struct Sender<F> {
    cc: FlowState<F>,
    start_at: Micros,
    stop_at: Micros,
    next_seq: u64,
    snd_una: u64,
    next_tx: u64,
    outstanding: BTreeMap<u64, Outstanding>,
    retransmit: BTreeSet<u64>,
    recover: Option<u64>,
    srtt: Option<f64>,
    backoff: u32,
    rto_deadline: Option<Micros>,
    rto_event_pending: bool,
    report: FlowReport,
}

impl<F: Scalar> Sender<F> {
    fn rto(&self) -> Micros {
        let base = match self.srtt {
            Some(srtt) => Micros::from_micros((2.0 * srtt).round() as u64).max(MIN_RTO),
            None => INITIAL_RTO,
        };
        Micros(base.as_micros().saturating_mul(u64::from(self.backoff))).min(MAX_RTO)
    }

    fn update_rtt(&mut self, rtt: Micros) {
        let r = rtt.as_micros() as f64;
        self.srtt = Some(match self.srtt {
            None => r,
            Some(s) => 0.875 * s + 0.125 * r,
        });
    }

    fn pipe(&self) -> u32 {
        self.outstanding.len() as u32
    }

    fn active(&self, now: Micros) -> bool {
        now >= self.start_at && now < self.stop_at
    }
}

#[derive(Default)]
struct Receiver {
    cum: u64,
    above: BTreeSet<u64>,
}

impl Receiver {
    /// Returns whether `seq` is new.
    fn accept(&mut self, seq: u64) -> bool {
        if seq < self.cum || self.above.contains(&seq) {
            return false;
        }
        if seq == self.cum {
            self.cum += 1;
            while self.above.remove(&self.cum) {
                self.cum += 1;
            }
        } else {
            self.above.insert(seq);
        }
        true
    }
}

struct Sim<'a, F> {
    config: &'a EmuConfig,
    duration: Micros,
    down_delay: Micros,
    up_delay: Micros,
    events: EventQueue<Event>,
    links: Vec<Link>,
    ack_links: Vec<AckLink>,
    senders: Vec<Sender<F>>,
    receivers: Vec<Receiver>,
    records: Vec<PacketRecord>,
    scratch: Vec<Packet>,
}

/// Runs the emulation for `duration` and returns every delivery record.
pub fn run<F: Scalar>(config: &EmuConfig, flows: &[FlowSpec], duration: Micros) -> Result<RunReport, EmuError> {
    if flows.is_empty() {
        return Err(EmuError::NoFlows);
    }
    if duration == Micros::ZERO {
        return Err(EmuError::ZeroDuration);
    }
    config.validate()?;
    for (i, f) in flows.iter().enumerate() {
        if let Some(stop) = f.stop_at {
            if stop <= f.start_at {
                return Err(EmuError::InvalidConfig(format!("flow {i} stops before it starts")));
            }
        }
    }
    let mut sim = Sim::<F>::new(config, flows, duration);
    sim.run()?;
    Ok(sim.finish())
}

impl<'a, F: Scalar> Sim<'a, F> {
    fn new(config: &'a EmuConfig, flows: &[FlowSpec], duration: Micros) -> Self {
        let n_links = match config.queue_mode {
            QueueMode::PerFlow => flows.len(),
            QueueMode::Shared => 1,
        };
        let links = (0..n_links)
            .map(|_| Link {
                queue: match config.aqm {
                    Aqm::DropTail => BottleneckQueue::drop_tail(config.buffer_bytes),
                    Aqm::CoDel => BottleneckQueue::with_codel(config.buffer_bytes, config.codel, config.mtu_bytes),
                },
                cursor: 0,
                pending: None,
            })
            .collect();
        let mut events = EventQueue::new();
        let senders = flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                events.push(f.start_at, Event::FlowStart(i));
                Sender {
                    cc: f.cc.build::<F>(config.mtu_bytes),
                    start_at: f.start_at,
                    stop_at: f.stop_at.unwrap_or(Micros::MAX),
                    next_seq: 0,
                    snd_una: 0,
                    next_tx: 0,
                    outstanding: BTreeMap::new(),
                    retransmit: BTreeSet::new(),
                    recover: None,
                    srtt: None,
                    backoff: 1,
                    rto_deadline: None,
                    rto_event_pending: false,
                    report: FlowReport {
                        flow_id: i,
                        scheme: f.cc.label(),
                        start_at: f.start_at,
                        stop_at: f.stop_at.unwrap_or(duration).min(duration),
                        sent: 0,
                        retransmits: 0,
                        arrived: 0,
                        duplicates: 0,
                        dropped: 0,
                        in_network_at_end: 0,
                        fast_recoveries: 0,
                        timeouts: 0,
                        bad_conditions: 0,
                        final_cwnd: 0.0,
                        c2tcp: None,
                        tuning: Vec::new(),
                    },
                }
            })
            .collect();
        let down_delay = Micros(config.base_rtt.as_micros() / 2);
        Sim {
            config,
            duration,
            down_delay,
            up_delay: config.base_rtt - down_delay,
            events,
            links,
            ack_links: (0..n_links).map(|_| AckLink::default()).collect(),
            senders,
            receivers: flows.iter().map(|_| Receiver::default()).collect(),
            records: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn link_of(&self, flow: usize) -> usize {
        match self.config.queue_mode {
            QueueMode::PerFlow => flow,
            QueueMode::Shared => 0,
        }
    }


    fn run(&mut self) -> Result<(), EmuError> {
        while let Some(t) = self.events.peek_time() {
            if t >= self.duration {
                break;
            }
            let (now, ev) = self.events.pop().expect("peeked");
            match ev {
                Event::FlowStart(f) => {
                    if self.senders[f].cc.c2tcp_state().is_some() {
                        self.events.push(now + TUNING_CYCLE, Event::Tune(f));
                    }
                    self.try_send(f, now);
                }
                Event::Opportunity(l) => self.serve_link(l, now),
                Event::DataArrival(p, dequeued_at) => self.on_data(p, dequeued_at, now),
                Event::AckOpportunity(l) => self.serve_ack_link(l, now),
                Event::AckArrival(a) => {
                    self.on_ack(a, now)?;
                    self.try_send(a.flow_id, now);
                }
                Event::Rto(f) => self.on_rto_event(f, now),
                Event::Tune(f) => self.on_tune(f, now),
            }
        }
        Ok(())
    }

    fn on_tune(&mut self, f: usize, now: Micros) {
        let s = &mut self.senders[f];
        let had_samples = s.cc.c2tcp_state().is_some_and(|c| c.cycle_rtt_count > 0);
        s.cc.tuner_tick(now);
        if let Some(c) = s.cc.c2tcp_state() {
            s.report.tuning.push(TuningPoint {
                t_s: now.as_secs_f64(),
                alpha: c.alpha().to_f64_lossy(),
                avg_rtt_ms: c
                    .last_cycle_avg()
                    .filter(|_| had_samples)
                    .map(|a| a.to_f64_lossy() / 1_000.0),
            });
        }
        if now < s.stop_at {
            self.events.push(now + TUNING_CYCLE, Event::Tune(f));
        }
    }

    fn schedule_link(&mut self, l: usize, now: Micros) {
        let link = &mut self.links[l];
        if link.pending.is_some() || link.queue.is_empty() {
            return;
        }
        let trace = &self.config.trace;
        let idx = link.cursor.max(trace.first_index_at_or_after(now));
        link.pending = Some(idx);
        self.events.push(trace.opportunity_at(idx), Event::Opportunity(l));
    }

    fn serve_link(&mut self, l: usize, now: Micros) {
        let link = &mut self.links[l];
        let idx = link.pending.take().expect("opportunity was scheduled");
        link.cursor = idx + 1;
        self.scratch.clear();
        let pkt = link.queue.dequeue(now, &mut self.scratch);
        for p in &self.scratch {
            self.senders[p.flow_id].report.dropped += 1;
        }
        if let Some(p) = pkt {
            self.events.push(now + self.down_delay, Event::DataArrival(p, now));
        }
        self.schedule_link(l, now);
    }

    fn on_data(&mut self, p: Packet, dequeued_at: Micros, now: Micros) {
        let f = p.flow_id;
        let rx = &mut self.receivers[f];
        let fresh = rx.accept(p.seq);
        let report = &mut self.senders[f].report;
        report.arrived += 1;
        let record = if fresh {
            self.records.push(PacketRecord {
                flow_id: f,
                seq: p.seq,
                sent_at: p.sent_at,
                delivered_at: now,
                queuing_delay: dequeued_at - p.enqueued_at,
                e2e_rtt: None,
                size_bytes: p.size_bytes,
            });
            Some(self.records.len() - 1)
        } else {
            report.duplicates += 1;
            None
        };
        let ack = Ack {
            flow_id: f,
            cum_ack: rx.cum,
            tx_id: p.tx_id,
            sent_at: p.sent_at,
            record,
        };
        match &self.config.uplink {
            Uplink::FixedDelay => self.events.push(now + self.up_delay, Event::AckArrival(ack)),
            Uplink::Trace(_) => {
                let l = self.link_of(f);
                self.ack_links[l].queue.push_back(ack);
                self.schedule_ack_link(l, now);
            }
        }
    }

    fn schedule_ack_link(&mut self, l: usize, now: Micros) {
        let Uplink::Trace(trace) = &self.config.uplink else {
            return;
        };
        let link = &mut self.ack_links[l];
        if link.pending.is_some() || link.queue.is_empty() {
            return;
        }
        let idx = link.cursor.max(trace.first_index_at_or_after(now));
        link.pending = Some(idx);
        self.events.push(trace.opportunity_at(idx), Event::AckOpportunity(l));
    }

    fn serve_ack_link(&mut self, l: usize, now: Micros) {
        let link = &mut self.ack_links[l];
        let idx = link.pending.take().expect("opportunity was scheduled");
        link.cursor = idx + 1;
        if let Some(ack) = link.queue.pop_front() {
            self.events.push(now + self.up_delay, Event::AckArrival(ack));
        }
        self.schedule_ack_link(l, now);
    }

    fn on_ack(&mut self, ack: Ack, now: Micros) -> Result<(), EmuError> {
        let s = &mut self.senders[ack.flow_id];
        let rtt = now - ack.sent_at;
        if let Some(i) = ack.record {
            self.records[i].e2e_rtt = Some(rtt);
        }
        s.update_rtt(rtt);

        s.outstanding.remove(&ack.tx_id);
        let flight = s.pipe();
        let mut lost = Vec::new();
        for (&tx, o) in s.outstanding.range_mut(..ack.tx_id) {
            o.skips += 1;
            if o.skips >= DUP_THRESHOLD {
                lost.push(tx);
            }
        }
        for tx in &lost {
            let o = s.outstanding.remove(tx).expect("listed above");
            if o.seq >= ack.cum_ack.max(s.snd_una) {
                s.retransmit.insert(o.seq);
            }
        }

        let newly_acked = ack.cum_ack.saturating_sub(s.snd_una);
        if newly_acked > 0 {
            s.snd_una = ack.cum_ack;
            s.retransmit = s.retransmit.split_off(&s.snd_una);
            s.backoff = 1;
            s.rto_deadline = None;
        }

        let pipe = s.pipe();
        s.cc.set_inflight(pipe);
        let sample = cc::AckSample {
            rtt,
            now,
            acked_bytes: newly_acked * u64::from(self.config.mtu_bytes),
        };
        let report = s.cc.on_ack(&sample)?;
        if report.enforced && report.fired() == Some(Condition::Bad) {
            s.report.bad_conditions += 1;
        }

        if !lost.is_empty() && s.recover.is_none() {
            s.cc.set_inflight(flight);
            s.cc.on_loss(LossKind::TripleDupAck);
            s.cc.set_inflight(pipe);
            s.recover = Some(s.next_seq.saturating_sub(1));
            s.report.fast_recoveries += 1;
        }
        if let Some(r) = s.recover {
            if s.snd_una > r {
                s.recover = None;
                s.cc.exit_recovery();
            }
        }
        if s.outstanding.is_empty() && s.retransmit.is_empty() {
            s.rto_deadline = None;
        }
        Ok(())
    }

    fn try_send(&mut self, f: usize, now: Micros) {
        let l = self.link_of(f);
        let mtu = self.config.mtu_bytes;
        loop {
            let s = &mut self.senders[f];
            if !s.active(now) || !s.cc.cwnd_allows_send(s.pipe()) {
                break;
            }
            let seq = match s.retransmit.pop_first() {
                Some(seq) => {
                    s.report.retransmits += 1;
                    seq
                }
                None => {
                    s.next_seq += 1;
                    s.next_seq - 1
                }
            };
            let tx_id = s.next_tx;
            s.next_tx += 1;
            s.outstanding.insert(tx_id, Outstanding { seq, skips: 0 });
            s.report.sent += 1;
            let pkt = Packet {
                flow_id: f,
                seq,
                tx_id,
                size_bytes: mtu,
                sent_at: now,
                enqueued_at: now,
            };
            match self.links[l].queue.enqueue(pkt, now) {
                EnqueueOutcome::Accepted => self.schedule_link(l, now),
                EnqueueOutcome::Dropped => self.senders[f].report.dropped += 1,
            }
        }
        let s = &mut self.senders[f];
        s.cc.set_inflight(s.pipe());
        if s.rto_deadline.is_none() && !s.outstanding.is_empty() {
            let deadline = now + s.rto();
            s.rto_deadline = Some(deadline);
            if !s.rto_event_pending {
                s.rto_event_pending = true;
                self.events.push(deadline, Event::Rto(f));
            }
        }
    }

    fn on_rto_event(&mut self, f: usize, now: Micros) {
        let s = &mut self.senders[f];
        s.rto_event_pending = false;
        match s.rto_deadline {
            None => return,
            Some(d) if now < d => {
                s.rto_event_pending = true;
                self.events.push(d, Event::Rto(f));
                return;
            }
            Some(_) => {}
        }
        s.report.timeouts += 1;
        let flight = s.pipe();
        let snd_una = s.snd_una;
        let outstanding = std::mem::take(&mut s.outstanding);
        s.retransmit.extend(outstanding.values().map(|o| o.seq).filter(|&q| q >= snd_una));
        s.cc.set_inflight(flight);
        s.cc.on_loss(LossKind::Timeout);
        s.recover = Some(s.next_seq.saturating_sub(1));
        s.backoff = (s.backoff * 2).min(64);
        s.rto_deadline = None;
        self.try_send(f, now);
    }

    fn finish(mut self) -> RunReport {
        for link in &self.links {
            for p in link.queue.packets() {
                self.senders[p.flow_id].report.in_network_at_end += 1;
            }
        }
        for (_, ev) in self.events.iter() {
            if let Event::DataArrival(p, _) = ev {
                self.senders[p.flow_id].report.in_network_at_end += 1;
            }
        }
        let flows = self
            .senders
            .into_iter()
            .map(|s| {
                let mut report = s.report;
                report.final_cwnd = s.cc.cwnd().to_f64_lossy();
                report.c2tcp = s.cc.c2tcp_state().map(|c| C2tcpSnapshot {
                    alpha: c.alpha().to_f64_lossy(),
                    minrtt_ms: c.minrtt().to_f64_lossy() / 1_000.0,
                    setpoint_ms: c.setpoint().to_f64_lossy() / 1_000.0,
                    target_ms: c.target().as_millis_f64(),
                });
                report
            })
            .collect();
        RunReport {
            duration: self.duration,
            warmup: self.config.warmup,
            queue_mode: self.config.queue_mode,
            mtu_bytes: self.config.mtu_bytes,
            trace: self.config.trace.clone(),
            records: self.records,
            flows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{gen_constant, parse_trace};

    fn constant(mbps: f64, secs: u64) -> EmuConfig {
        EmuConfig::new(gen_constant(mbps, Micros::from_secs(secs)).unwrap())
    }

    fn newreno() -> FlowSpec {
        FlowSpec::new(CcSpec::LossBased(Flavor::NewReno))
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = constant(12.0, 1);
        assert_eq!(run::<f64>(&cfg, &[], Micros::from_secs(1)), Err(EmuError::NoFlows));
        assert_eq!(run::<f64>(&cfg, &[newreno()], Micros::ZERO), Err(EmuError::ZeroDuration));
        let flat = EmuConfig::new(parse_trace("0\n0\n").unwrap());
        assert_eq!(run::<f64>(&flat, &[newreno()], Micros::from_secs(1)), Err(EmuError::DegenerateTrace));
        let mut tiny = constant(12.0, 1);
        tiny.buffer_bytes = 1000;
        assert!(matches!(
            run::<f64>(&tiny, &[newreno()], Micros::from_secs(1)),
            Err(EmuError::InvalidConfig(_))
        ));
        let backwards = newreno().starting_at(Micros::from_secs(2)).stopping_at(Micros::from_secs(1));
        assert!(matches!(
            run::<f64>(&cfg, &[backwards], Micros::from_secs(3)),
            Err(EmuError::InvalidConfig(_))
        ));
    }

    #[test]
    fn first_packet_timing() {
        // Opportunities at 1, 2, 3 ms; a packet sent at 0 leaves at 1 ms and
        // its ack returns one base RTT later.
        let cfg = EmuConfig::new(parse_trace("1\n2\n3\n").unwrap());
        let r = run::<f64>(&cfg, &[newreno()], Micros::from_millis(25)).unwrap();
        let first = r.records[0];
        assert_eq!(first.queuing_delay, Micros::from_millis(1));
        assert_eq!(first.delivered_at, Micros::from_millis(11));
        assert_eq!(first.e2e_rtt, Some(Micros::from_millis(21)));
        // Ten packets in the initial window leave one per opportunity.
        let departures: Vec<_> = r.records.iter().take(10).map(|p| p.delivered_at.as_micros() / 1000 - 10).collect();
        assert_eq!(departures, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn repeated_timestamps_release_several_packets() {
        let cfg = EmuConfig::new(parse_trace("5\n5\n5\n").unwrap());
        let r = run::<f64>(&cfg, &[newreno()], Micros::from_millis(16)).unwrap();
        let at_15: Vec<_> = r.records.iter().filter(|p| p.delivered_at == Micros::from_millis(15)).collect();
        assert_eq!(at_15.len(), 3);
    }

    #[test]
    fn idle_opportunities_are_wasted() {
        // Flow starts at 100 ms on a 1-per-ms trace: the first packet departs
        // at 100 ms, not at the first trace entry.
        let cfg = constant(12.0, 1);
        let f = newreno().starting_at(Micros::from_millis(100));
        let r = run::<f64>(&cfg, &[f], Micros::from_millis(200)).unwrap();
        assert_eq!(r.records[0].queuing_delay, Micros::ZERO);
        assert_eq!(r.records[0].delivered_at, Micros::from_millis(110));
    }

    #[test]
    fn single_newreno_fills_constant_link() {
        let cfg = constant(12.0, 60);
        let r = run::<f64>(&cfg, &[newreno()], Micros::from_secs(60)).unwrap();
        let s = r.flow_summary(0);
        assert!(s.throughput_mbps > 11.0 && s.throughput_mbps <= 12.0 + 1e-9, "{s:?}");
        let max_q = r.records.iter().map(|p| p.queuing_delay).max().unwrap();
        // 100 packets of buffer drained at one per ms, plus opportunity rounding.
        assert!(max_q <= Micros::from_millis(101), "{max_q}");
        assert!(r.flows[0].fast_recoveries > 0);
    }

    #[test]
    fn conservation_and_no_reordering() {
        let mut cfg = constant(12.0, 20);
        cfg.buffer_bytes = 30_000;
        let flows = [
            FlowSpec::new(CcSpec::LossBased(Flavor::Cubic)),
            FlowSpec::new(CcSpec::c2tcp(50, Flavor::NewReno)).starting_at(Micros::from_secs(1)),
        ];
        cfg.queue_mode = QueueMode::Shared;
        let r = run::<f64>(&cfg, &flows, Micros::from_secs(20)).unwrap();
        for f in &r.flows {
            assert!(f.dropped > 0);
            assert_eq!(f.sent, f.arrived + f.dropped + f.in_network_at_end, "{f:?}");
        }
        for flow in 0..2 {
            let mut last = Micros::ZERO;
            for p in r.flow_records(flow) {
                assert!(p.delivered_at >= last);
                last = p.delivered_at;
            }
        }
    }

    #[test]
    fn delay_decomposition() {
        let cfg = constant(12.0, 10);
        let flows = [FlowSpec::new(CcSpec::LossBased(Flavor::Cubic))];
        let r = run::<f64>(&cfg, &flows, Micros::from_secs(10)).unwrap();
        for p in &r.records {
            let Some(rtt) = p.e2e_rtt else { continue };
            assert_eq!(rtt, cfg.base_rtt + p.queuing_delay, "{p:?}");
            assert_eq!(p.delivered_at, p.sent_at + p.queuing_delay + Micros(cfg.base_rtt.as_micros() / 2));
        }
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let cfg = constant(6.0, 10);
        let r = run::<f64>(&cfg, &[newreno()], Micros::from_secs(10)).unwrap();
        for w in 0..100 {
            let start = Micros::from_millis(w * 100);
            let end = Micros::from_millis(w * 100 + 100);
            let down = Micros::from_millis(10);
            let delivered = r
                .records
                .iter()
                .filter(|p| p.delivered_at >= start + down && p.delivered_at < end + down)
                .count() as u64;
            assert!(delivered <= cfg.trace.opportunities_between(start, end));
        }
    }

    #[test]
    fn deterministic() {
        let mut cfg = constant(12.0, 10);
        cfg.aqm = Aqm::CoDel;
        let flows = [FlowSpec::new(CcSpec::c2tcp(50, Flavor::Cubic)), newreno()];
        let a = run::<f64>(&cfg, &flows, Micros::from_secs(10)).unwrap();
        let b = run::<f64>(&cfg, &flows, Micros::from_secs(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uplink_trace_delays_acks() {
        let mut cfg = constant(12.0, 5);
        cfg.uplink = Uplink::Trace(parse_trace("10\n").unwrap());
        let r = run::<f64>(&cfg, &[newreno()], Micros::from_secs(5)).unwrap();
        // One ack opportunity per 10 ms: acks pile up on the reverse path and
        // the flow runs far below the 12 Mbps downlink.
        let s = r.flow_summary(0);
        assert!(s.throughput_mbps < 3.0, "{s:?}");
        assert!(s.avg_e2e_delay_ms > 100.0, "{s:?}");
        assert!(s.avg_queuing_delay_ms < 1.0, "{s:?}");
    }

    #[test]
    fn single_precision_run() {
        let cfg = constant(12.0, 5);
        let flows = [FlowSpec::new(CcSpec::c2tcp(50, Flavor::NewReno))];
        let r = run::<f32>(&cfg, &flows, Micros::from_secs(5)).unwrap();
        assert!(r.flow_summary(0).throughput_mbps > 5.0);
    }
}
