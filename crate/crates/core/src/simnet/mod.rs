//! Discrete-event simulation primitives: virtual time, a deterministic event queue,
//! skewed physical clocks, FIFO channel sequencing and the cluster topology.

mod time;

pub use time::{ms_to_us, SimTime};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;

use crate::types::{DcId, NodeId, PartitionId};

struct Scheduled<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed so the max-heap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Events run in `(time, insertion sequence)` order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    next_seq: u64,
    now: SimTime,
    executed: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: SimTime::ZERO,
            executed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events popped so far.
    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at `at`; times in the past are clamped to now.
    pub fn schedule(&mut self, at: SimTime, event: E) {
        let at = at.max(self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { at, seq, event });
    }

    pub fn schedule_in(&mut self, delay_us: u64, event: E) {
        self.schedule(self.now + delay_us, event);
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|s| s.at)
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let s = self.heap.pop()?;
        self.now = s.at;
        self.executed += 1;
        Some((s.at, s.event))
    }

    /// Pops the next event only if it is due no later than `limit`.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<(SimTime, E)> {
        if self.peek_time()? > limit {
            return None;
        }
        self.pop()
    }
}

/// A node's physical clock: `floor((sim_us * (1 + drift) + offset_us) / 1000)` in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalClock {
    pub offset_us: i64,
    pub drift: f64,
}

impl PhysicalClock {
    pub const EXACT: PhysicalClock = PhysicalClock {
        offset_us: 0,
        drift: 0.0,
    };

    pub fn new(offset_ms: f64, drift: f64) -> Self {
        assert!(drift > -1.0, "drift must keep the clock moving forward");
        PhysicalClock {
            offset_us: (offset_ms * 1000.0).round() as i64,
            drift,
        }
    }

    pub fn offset_ms(&self) -> f64 {
        self.offset_us as f64 / 1000.0
    }

    pub fn read_ms(&self, now: SimTime) -> u64 {
        let scaled = if self.drift == 0.0 {
            now.micros() as i128
        } else {
            (now.micros() as f64 * (1.0 + self.drift)).floor() as i128
        };
        let us = scaled + self.offset_us as i128;
        if us <= 0 {
            0
        } else {
            (us / 1000) as u64
        }
    }
}

/// Draws a per-node clock: offset uniform in `[-skew/2, +skew/2]` ms and drift uniform in
/// `[-max_drift, +max_drift]`.
pub fn sample_clock<R: Rng>(rng: &mut R, skew_ms: f64, max_drift: f64) -> PhysicalClock {
    let offset = if skew_ms > 0.0 {
        rng.gen_range(-skew_ms / 2.0..=skew_ms / 2.0)
    } else {
        0.0
    };
    let drift = if max_drift > 0.0 {
        rng.gen_range(-max_drift..=max_drift)
    } else {
        0.0
    };
    PhysicalClock::new(offset, drift)
}

/// Uniform delay in `[lo, hi]` microseconds.
pub fn sample_delay<R: Rng>(rng: &mut R, lo: u64, hi: u64) -> u64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Sender half of a FIFO channel: stamps messages with consecutive sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct FifoSender {
    next: u64,
}

impl FifoSender {
    pub fn stamp(&mut self) -> u64 {
        self.next += 1;
        self.next
    }
}

/// Receiver half: releases messages strictly in sequence order, buffering early arrivals.
#[derive(Debug, Clone)]
pub struct FifoReceiver<M> {
    delivered: u64,
    held: BTreeMap<u64, M>,
}

impl<M> Default for FifoReceiver<M> {
    fn default() -> Self {
        FifoReceiver {
            delivered: 0,
            held: BTreeMap::new(),
        }
    }
}

impl<M> FifoReceiver<M> {
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    pub fn receive(&mut self, seq: u64, msg: M) -> Vec<M> {
        if seq <= self.delivered {
            return Vec::new();
        }
        self.held.insert(seq, msg);
        let mut out = Vec::new();
        while let Some(m) = self.held.remove(&(self.delivered + 1)) {
            self.delivered += 1;
            out.push(m);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeInfo {
    pub dc: DcId,
    pub partition: PartitionId,
    /// Replica slot within the group; the XC learner takes slot `replicas`.
    pub slot: u16,
    pub is_xc: bool,
}

/// `dcs x partitions` groups, each with `replicas` data nodes followed by one XC learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub dcs: u16,
    pub partitions: u16,
    pub replicas: u16,
}

impl Topology {
    pub fn new(dcs: u16, partitions: u16, replicas: u16) -> Self {
        assert!(dcs > 0 && partitions > 0 && replicas > 0);
        Topology {
            dcs,
            partitions,
            replicas,
        }
    }

    fn group_size(&self) -> u32 {
        self.replicas as u32 + 1
    }

    fn group_base(&self, dc: DcId, p: PartitionId) -> u32 {
        (dc.0 as u32 * self.partitions as u32 + p.0 as u32) * self.group_size()
    }

    pub fn node_count(&self) -> usize {
        self.dcs as usize * self.partitions as usize * self.group_size() as usize
    }

    pub fn data_nodes(&self, dc: DcId, p: PartitionId) -> Vec<NodeId> {
        let base = self.group_base(dc, p);
        (0..self.replicas as u32).map(|r| NodeId(base + r)).collect()
    }

    pub fn xc(&self, dc: DcId, p: PartitionId) -> NodeId {
        NodeId(self.group_base(dc, p) + self.replicas as u32)
    }

    pub fn info(&self, node: NodeId) -> NodeInfo {
        let g = node.0 / self.group_size();
        let slot = (node.0 % self.group_size()) as u16;
        NodeInfo {
            dc: DcId((g / self.partitions as u32) as u16),
            partition: PartitionId((g % self.partitions as u32) as u16),
            slot,
            is_xc: slot == self.replicas,
        }
    }

    pub fn all_nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count() as u32).map(NodeId)
    }

    pub fn dc_ids(&self) -> impl Iterator<Item = DcId> {
        (0..self.dcs).map(DcId)
    }

    pub fn partition_ids(&self) -> impl Iterator<Item = PartitionId> {
        (0..self.partitions).map(PartitionId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_times_run_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), "b");
        q.schedule(SimTime(3), "a");
        q.schedule(SimTime(5), "c");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert_eq!(q.executed(), 3);
    }

    #[test]
    fn past_events_are_clamped_to_now() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), 1);
        q.pop();
        q.schedule(SimTime(2), 2);
        assert_eq!(q.pop(), Some((SimTime(10), 2)));
    }

    #[test]
    fn physical_clock_examples() {
        assert_eq!(PhysicalClock::EXACT.read_ms(SimTime::from_ms(100)), 100);
        assert_eq!(PhysicalClock::new(50.0, 0.0).read_ms(SimTime::from_ms(100)), 150);
        assert_eq!(PhysicalClock::new(0.0, 0.01).read_ms(SimTime::from_ms(1000)), 1010);
        assert_eq!(PhysicalClock::new(-50.0, 0.0).read_ms(SimTime::from_ms(10)), 0);
    }

    #[test]
    fn fifo_receiver_reorders() {
        let mut rx = FifoReceiver::default();
        assert!(rx.receive(2, 'b').is_empty());
        assert!(rx.receive(3, 'c').is_empty());
        assert_eq!(rx.receive(1, 'a'), vec!['a', 'b', 'c']);
        assert!(rx.receive(2, 'x').is_empty(), "duplicates are dropped");
        assert_eq!(rx.delivered(), 3);
    }

    #[test]
    fn topology_layout_round_trips() {
        let t = Topology::new(2, 4, 3);
        assert_eq!(t.node_count(), 32);
        for dc in t.dc_ids() {
            for p in t.partition_ids() {
                for (slot, n) in t.data_nodes(dc, p).into_iter().enumerate() {
                    let info = t.info(n);
                    assert_eq!((info.dc, info.partition, info.slot as usize, info.is_xc), (dc, p, slot, false));
                }
                let xi = t.info(t.xc(dc, p));
                assert!(xi.is_xc && xi.dc == dc && xi.partition == p);
            }
        }
    }

    proptest! {
        #[test]
        fn physical_clock_never_runs_backwards(
            offset in -100.0f64..100.0, drift in -0.05f64..0.05,
            mut times in proptest::collection::vec(0u64..10_000_000, 1..50)
        ) {
            times.sort();
            let clk = PhysicalClock::new(offset, drift);
            let reads: Vec<u64> = times.iter().map(|&t| clk.read_ms(SimTime(t))).collect();
            prop_assert!(reads.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn fifo_delivers_each_seq_once_in_order(perm_seed: u64, n in 1usize..60, dups in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut arrivals: Vec<u64> = (1..=n as u64).collect();
            for _ in 0..dups {
                arrivals.push(rng.gen_range(1..=n as u64));
            }
            for i in (1..arrivals.len()).rev() {
                arrivals.swap(i, rng.gen_range(0..=i));
            }
            let mut rx = FifoReceiver::default();
            let mut out = Vec::new();
            for s in arrivals {
                out.extend(rx.receive(s, s));
            }
            prop_assert_eq!(out, (1..=n as u64).collect::<Vec<_>>());
        }

        #[test]
        fn sampled_offsets_stay_within_skew(seed: u64, skew in 0.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_clock(&mut rng, skew, 0.0);
            prop_assert!(c.offset_ms().abs() <= skew / 2.0 + 0.001);
        }
    }
}
