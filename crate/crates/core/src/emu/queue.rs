//! Byte-limited bottleneck queue with optional CoDel.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::Micros;

/// A data packet inside the emulator.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub flow_id: usize,
    pub seq: u64,
    /// Sender-side transmission id, echoed back by the ack.
    pub tx_id: u64,
    pub size_bytes: u32,
    pub sent_at: Micros,
    pub enqueued_at: Micros,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    Dropped,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodelParams {
    pub target: Micros,
    pub interval: Micros,
}

impl Default for CodelParams {
    fn default() -> Self {
        CodelParams {
            target: Micros::from_millis(5),
            interval: Micros::from_millis(100),
        }
    }
}

/// Sojourn-time controller state, dequeue side.
#[derive(Clone, Debug, PartialEq)]
pub struct Codel {
    params: CodelParams,
    max_packet: u64,
    first_above_time: Option<Micros>,
    drop_next: Micros,
    count: u32,
    last_count: u32,
    dropping: bool,
}

impl Codel {
    pub fn new(params: CodelParams, max_packet: u32) -> Self {
        Codel {
            params,
            max_packet: u64::from(max_packet),
            first_above_time: None,
            drop_next: Micros::ZERO,
            count: 0,
            last_count: 0,
            dropping: false,
        }
    }

    pub fn dropping(&self) -> bool {
        self.dropping
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    fn control_law(&self, t: Micros) -> Micros {
        let gap = self.params.interval.as_micros() as f64 / f64::from(self.count).sqrt();
        t + Micros::from_micros(gap.round() as u64)
    }

    /// Pops the head and reports whether it is eligible for dropping.
    fn do_dequeue(&mut self, q: &mut Fifo, now: Micros) -> (Option<Packet>, bool) {
        let Some(p) = q.pop() else {
            self.first_above_time = None;
            return (None, false);
        };
        let sojourn = now.saturating_sub(p.enqueued_at);
        if sojourn < self.params.target || q.bytes <= self.max_packet {
            self.first_above_time = None;
            return (Some(p), false);
        }
        match self.first_above_time {
            None => {
                self.first_above_time = Some(now + self.params.interval);
                (Some(p), false)
            }
            Some(t) => (Some(p), now >= t),
        }
    }

    /// Dequeues the next packet to forward, appending any packets it drops.
    fn dequeue(&mut self, q: &mut Fifo, now: Micros, dropped: &mut Vec<Packet>) -> Option<Packet> {
        let (mut p, ok_to_drop) = self.do_dequeue(q, now);
        if self.dropping {
            if !ok_to_drop {
                self.dropping = false;
            }
            while self.dropping && now >= self.drop_next {
                dropped.extend(p.take());
                self.count += 1;
                let (next, ok) = self.do_dequeue(q, now);
                p = next;
                if ok {
                    self.drop_next = self.control_law(self.drop_next);
                } else {
                    self.dropping = false;
                }
            }
        } else if ok_to_drop {
            dropped.extend(p.take());
            let (next, _) = self.do_dequeue(q, now);
            p = next;
            self.dropping = true;
            let delta = self.count.saturating_sub(self.last_count);
            let recent = now.saturating_sub(self.drop_next) < Micros(16 * self.params.interval.as_micros());
            self.count = if delta > 1 && recent { delta } else { 1 };
            self.drop_next = self.control_law(now);
            self.last_count = self.count;
        }
        p
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Fifo {
    packets: VecDeque<Packet>,
    bytes: u64,
}

impl Fifo {
    fn pop(&mut self) -> Option<Packet> {
        let p = self.packets.pop_front()?;
        self.bytes -= u64::from(p.size_bytes);
        Some(p)
    }
}

/// Drop-tail FIFO limited by bytes, optionally managed by CoDel.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckQueue {
    fifo: Fifo,
    limit_bytes: u64,
    codel: Option<Codel>,
}

impl BottleneckQueue {
    pub fn drop_tail(limit_bytes: u64) -> Self {
        BottleneckQueue {
            fifo: Fifo::default(),
            limit_bytes,
            codel: None,
        }
    }

    pub fn with_codel(limit_bytes: u64, params: CodelParams, mtu: u32) -> Self {
        BottleneckQueue {
            codel: Some(Codel::new(params, mtu)),
            ..Self::drop_tail(limit_bytes)
        }
    }

    pub fn occupied_bytes(&self) -> u64 {
        self.fifo.bytes
    }

    pub fn len(&self) -> usize {
        self.fifo.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.packets.is_empty()
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.fifo.packets.iter()
    }

    pub fn codel(&self) -> Option<&Codel> {
        self.codel.as_ref()
    }

    /// Accepts iff the packet fits in the remaining byte budget.
    pub fn enqueue(&mut self, mut pkt: Packet, now: Micros) -> EnqueueOutcome {
        if self.fifo.bytes + u64::from(pkt.size_bytes) > self.limit_bytes {
            return EnqueueOutcome::Dropped;
        }
        pkt.enqueued_at = now;
        self.fifo.bytes += u64::from(pkt.size_bytes);
        self.fifo.packets.push_back(pkt);
        EnqueueOutcome::Accepted
    }

    /// Serves one delivery opportunity. AQM drops are appended to `dropped`.
    pub fn dequeue(&mut self, now: Micros, dropped: &mut Vec<Packet>) -> Option<Packet> {
        match self.codel.as_mut() {
            Some(codel) => codel.dequeue(&mut self.fifo, now, dropped),
            None => self.fifo.pop(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(seq: u64, size: u32) -> Packet {
        Packet {
            flow_id: 0,
            seq,
            tx_id: seq,
            size_bytes: size,
            sent_at: Micros::ZERO,
            enqueued_at: Micros::ZERO,
        }
    }

    #[test]
    fn drop_tail_boundaries() {
        let mut q = BottleneckQueue::drop_tail(150_000);
        assert_eq!(q.enqueue(pkt(0, 1500), Micros::ZERO), EnqueueOutcome::Accepted);

        let mut q = BottleneckQueue::drop_tail(150_000);
        for i in 0..99 {
            q.enqueue(pkt(i, 1500), Micros::ZERO);
        }
        assert_eq!(q.occupied_bytes(), 148_500);
        assert_eq!(q.enqueue(pkt(99, 1500), Micros::ZERO), EnqueueOutcome::Accepted);
        assert_eq!(q.occupied_bytes(), 150_000);

        let mut q = BottleneckQueue::drop_tail(150_000);
        for i in 0..98 {
            q.enqueue(pkt(i, 1500), Micros::ZERO);
        }
        q.enqueue(pkt(98, 2000), Micros::ZERO);
        assert_eq!(q.occupied_bytes(), 149_000);
        assert_eq!(q.enqueue(pkt(99, 1500), Micros::ZERO), EnqueueOutcome::Dropped);
    }

    #[test]
    fn fifo_order_and_byte_accounting() {
        let mut q = BottleneckQueue::drop_tail(10_000);
        for i in 0..5 {
            q.enqueue(pkt(i, 1000), Micros(i));
        }
        let mut dropped = Vec::new();
        let seqs: Vec<_> = std::iter::from_fn(|| q.dequeue(Micros(10), &mut dropped)).map(|p| p.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
        assert_eq!(q.occupied_bytes(), 0);
        assert!(dropped.is_empty());
    }

    /// Drives a CoDel queue where every dequeued packet has waited at least
    /// `sojourn_ms`, serving one packet per millisecond. Returns the times
    /// (ms) at which packets were dropped.
    fn codel_drop_times(sojourn_ms: u64, until_ms: u64) -> Vec<u64> {
        let mut q = BottleneckQueue::with_codel(u64::MAX, CodelParams::default(), 1500);
        let mut seq = 0;
        let mut drops = Vec::new();
        for t in 0..until_ms {
            let now = Micros::from_millis(t + sojourn_ms);
            // Keep a standing backlog so the queue never holds a single packet.
            while q.len() < 8 {
                let enq = Micros::from_millis(t);
                q.enqueue(pkt(seq, 1500), enq);
                seq += 1;
            }
            let mut dropped = Vec::new();
            q.dequeue(now, &mut dropped);
            drops.extend(dropped.iter().map(|_| t + sojourn_ms));
        }
        drops
    }

    /// Independent schedule: first drop one interval after the sojourn first
    /// exceeds target, then gaps of interval / sqrt(count), evaluated on a
    /// 1 ms service grid.
    fn codel_schedule_oracle(start_ms: f64, until_ms: f64) -> Vec<u64> {
        let mut out = vec![(start_ms + 100.0) as u64];
        let mut next = start_ms + 100.0 + 100.0;
        let mut count = 1.0_f64;
        while next < until_ms {
            out.push(next.ceil() as u64);
            count += 1.0;
            next += 100.0 / count.sqrt();
        }
        out
    }

    #[test]
    fn codel_never_drops_below_target() {
        let mut q = BottleneckQueue::with_codel(u64::MAX, CodelParams::default(), 1500);
        let mut dropped = Vec::new();
        for t in 0..2_000 {
            while q.len() < 8 {
                q.enqueue(pkt(t, 1500), Micros::from_millis(t));
            }
            // Serve the head exactly 4 ms after it was enqueued.
            let head = q.packets().next().unwrap().enqueued_at;
            q.dequeue(head + Micros::from_millis(4), &mut dropped);
        }
        assert!(dropped.is_empty());
    }

    #[test]
    fn codel_hand_trace() {
        let drops = codel_drop_times(50, 600);
        // Service starts at 50 ms; the first packet sets first_above_time.
        assert_eq!(&drops[..4], &[150, 250, 321, 379]);
        let oracle = codel_schedule_oracle(50.0, 650.0);
        assert_eq!(drops, oracle);
        // Gap after the second drop is interval / sqrt(2).
        assert_eq!(drops[2] - drops[1], 71);
    }

    #[test]
    fn codel_leaves_dropping_state_when_delay_recovers() {
        let mut q = BottleneckQueue::with_codel(u64::MAX, CodelParams::default(), 1500);
        for i in 0..200 {
            q.enqueue(pkt(i, 1500), Micros::ZERO);
        }
        let mut dropped = Vec::new();
        for t in 0..200 {
            q.dequeue(Micros::from_millis(10 + t), &mut dropped);
        }
        assert!(!dropped.is_empty());
        assert!(q.codel().unwrap().dropping() || q.is_empty());
        // Fresh packets with zero sojourn end the dropping state.
        for i in 0..5 {
            q.enqueue(pkt(1000 + i, 1500), Micros::from_millis(500));
        }
        let before = dropped.len();
        q.dequeue(Micros::from_millis(500), &mut dropped);
        assert_eq!(dropped.len(), before);
        assert!(!q.codel().unwrap().dropping());
    }
}
