//! Randomized fault-injection runs for a single Raft group.
//!
//! A run drives one group through message loss, duplication, reordering by random delay,
//! and crash/restart cycles while proposing values at whichever node believes it leads.
//! Safety is observed continuously; liveness is checked after a calm settling phase.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EntryPayload, RaftConfig, RaftMessage, RaftNode, Role};
use crate::simnet::{sample_delay, EventQueue, SimTime};
use crate::types::NodeId;

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub voters: u32,
    pub learners: u32,
    pub drop_prob: f64,
    pub dup_prob: f64,
    /// One-way delay range in microseconds.
    pub delay_us: (u64, u64),
    pub crashes: bool,
    pub chaos_ms: u64,
    pub settle_ms: u64,
    pub proposals_per_ms: f64,
}

impl FuzzConfig {
    /// Varies group size and fault mix by seed.
    pub fn for_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f022);
        FuzzConfig {
            voters: [1, 3, 3, 5][rng.gen_range(0..4)],
            learners: rng.gen_range(0..=1),
            drop_prob: [0.0, 0.05, 0.1, 0.3][rng.gen_range(0..4)],
            dup_prob: [0.0, 0.05, 0.2][rng.gen_range(0..3)],
            delay_us: (100, [500, 2_000, 15_000][rng.gen_range(0..3)]),
            crashes: rng.gen_bool(0.6),
            chaos_ms: 400,
            settle_ms: 400,
            proposals_per_ms: 0.5,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct FuzzReport {
    pub seed: u64,
    pub violations: Vec<String>,
    pub leaders_elected: usize,
    pub committed: u64,
    pub messages: u64,
    pub crashes: u64,
}

enum Ev {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: RaftMessage<u64>,
    },
    Tick(NodeId),
    Propose,
    Crash(NodeId),
    Restart(NodeId),
}

struct Run {
    cfg: FuzzConfig,
    nodes: Vec<RaftNode<u64>>,
    alive: Vec<bool>,
    q: EventQueue<Ev>,
    rng: ChaCha8Rng,
    /// term -> the node that led it
    leaders: BTreeMap<u64, NodeId>,
    /// index -> (term, payload) of the first commit reported anywhere
    committed: BTreeMap<u64, (u64, EntryPayload<u64>)>,
    /// per node, the next index it must report
    next_report: Vec<u64>,
    next_value: u64,
    calm: bool,
    report: FuzzReport,
}

const TICK_US: u64 = 1_000;

pub fn run(seed: u64, cfg: FuzzConfig) -> FuzzReport {
    let n = cfg.voters + cfg.learners;
    let ids: Vec<NodeId> = (0..n).map(NodeId).collect();
    let raft_cfg = RaftConfig::with_tick(
        ids[..cfg.voters as usize].to_vec(),
        ids[cfg.voters as usize..].to_vec(),
        TICK_US,
    );
    let nodes = ids
        .iter()
        .map(|&id| RaftNode::new(id, raft_cfg.clone(), seed.wrapping_mul(31).wrapping_add(id.0 as u64), SimTime::ZERO))
        .collect();
    let mut r = Run {
        nodes,
        alive: vec![true; n as usize],
        q: EventQueue::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        leaders: BTreeMap::new(),
        committed: BTreeMap::new(),
        next_report: vec![1; n as usize],
        next_value: 1,
        calm: false,
        report: FuzzReport {
            seed,
            ..Default::default()
        },
        cfg,
    };
    for &id in &ids {
        r.q.schedule(SimTime(id.0 as u64 * 37), Ev::Tick(id));
    }
    r.q.schedule(SimTime::ZERO, Ev::Propose);
    if r.cfg.crashes {
        r.schedule_crashes();
    }
    let chaos_end = SimTime::from_ms(r.cfg.chaos_ms);
    let end = SimTime::from_ms(r.cfg.chaos_ms + r.cfg.settle_ms);
    while let Some((now, ev)) = r.q.pop_until(end) {
        if !r.calm && now >= chaos_end {
            r.calm = true;
            for i in 0..r.alive.len() {
                if !r.alive[i] {
                    r.alive[i] = true;
                    r.nodes[i].restart(now);
                    r.next_report[i] = 1;
                }
            }
        }
        r.step(now, ev);
    }
    r.final_checks(end);
    r.report
}

impl Run {
    fn schedule_crashes(&mut self) {
        let n = self.nodes.len() as u32;
        let count = self.rng.gen_range(1..=4);
        for _ in 0..count {
            let node = NodeId(self.rng.gen_range(0..n));
            let at = self.rng.gen_range(20..self.cfg.chaos_ms.saturating_sub(60).max(21));
            let down = self.rng.gen_range(5..60);
            self.q.schedule(SimTime::from_ms(at), Ev::Crash(node));
            self.q.schedule(SimTime::from_ms(at + down), Ev::Restart(node));
        }
    }

    fn step(&mut self, now: SimTime, ev: Ev) {
        match ev {
            Ev::Tick(id) => {
                if self.alive[id.index()] {
                    let out = self.nodes[id.index()].tick(now);
                    self.absorb(id, out, now);
                }
                self.q.schedule(now + TICK_US, Ev::Tick(id));
            }
            Ev::Deliver { from, to, msg } => {
                if self.alive[to.index()] {
                    let out = self.nodes[to.index()].handle_message(from, msg, now);
                    self.absorb(to, out, now);
                }
            }
            Ev::Propose => {
                // the last stretch is quiet so everything proposed can finish committing
                if now >= SimTime::from_ms(self.cfg.chaos_ms + self.cfg.settle_ms / 2) {
                    return;
                }
                for i in 0..self.nodes.len() {
                    if self.alive[i] && self.nodes[i].is_leader() {
                        let v = self.next_value;
                        self.next_value += 1;
                        if let Ok((_, _, out)) = self.nodes[i].propose(v, now) {
                            self.absorb(NodeId(i as u32), out, now);
                        }
                    }
                }
                let gap = (1000.0 / self.cfg.proposals_per_ms) as u64;
                self.q.schedule(now + self.rng.gen_range(1..=2 * gap), Ev::Propose);
            }
            Ev::Crash(id) => {
                if !self.calm && self.alive[id.index()] {
                    self.alive[id.index()] = false;
                    self.report.crashes += 1;
                }
            }
            Ev::Restart(id) => {
                if !self.alive[id.index()] {
                    self.alive[id.index()] = true;
                    self.nodes[id.index()].restart(now);
                    // a restarted node reports again from index 1
                    self.next_report[id.index()] = 1;
                }
            }
        }
        self.observe_roles();
    }

    fn absorb(&mut self, id: NodeId, out: super::Output<u64>, now: SimTime) {
        for e in out.committed {
            if e.index != self.next_report[id.index()] {
                self.report.violations.push(format!(
                    "{id} reported index {} out of order (expected {})",
                    e.index,
                    self.next_report[id.index()]
                ));
            }
            self.next_report[id.index()] = e.index + 1;
            match self.committed.get(&e.index) {
                None => {
                    self.committed.insert(e.index, (e.term, e.payload));
                    self.report.committed = self.report.committed.max(e.index);
                }
                Some((t, p)) if *t == e.term && *p == e.payload => {}
                Some((t, p)) => self.report.violations.push(format!(
                    "commit safety: {id} committed index {} as ({}, {:?}) but ({t}, {p:?}) was committed before",
                    e.index, e.term, e.payload
                )),
            }
        }
        for (to, msg) in out.messages {
            self.report.messages += 1;
            let copies = if self.calm {
                1
            } else if self.rng.gen_bool(self.cfg.drop_prob) {
                0
            } else if self.rng.gen_bool(self.cfg.dup_prob) {
                2
            } else {
                1
            };
            let drop_calm = self.calm && self.rng.gen_bool(self.cfg.drop_prob.min(0.1));
            if drop_calm {
                continue;
            }
            for _ in 0..copies {
                let d = sample_delay(&mut self.rng, self.cfg.delay_us.0, self.cfg.delay_us.1.min(if self.calm { 2_000 } else { u64::MAX }));
                self.q.schedule(
                    now + d,
                    Ev::Deliver {
                        from: id,
                        to,
                        msg: msg.clone(),
                    },
                );
            }
        }
    }

    fn observe_roles(&mut self) {
        for node in &self.nodes {
            if node.role() == Role::Leader {
                match self.leaders.get(&node.term()) {
                    None => {
                        self.leaders.insert(node.term(), node.id());
                        self.report.leaders_elected += 1;
                    }
                    Some(&l) if l == node.id() => {}
                    Some(&l) => self.report.violations.push(format!(
                        "election safety: {} and {l} both led term {}",
                        node.id(),
                        node.term()
                    )),
                }
            }
        }
    }

    fn final_checks(&mut self, end: SimTime) {
        for (i, a) in self.nodes.iter().enumerate() {
            for b in &self.nodes[i + 1..] {
                if let Some(msg) = log_matching_violation(a, b) {
                    self.report.violations.push(msg);
                }
            }
        }
        // Liveness after the calm phase: one leader, every replica caught up to its log.
        let leaders: Vec<&RaftNode<u64>> = self.nodes.iter().filter(|n| n.is_leader()).collect();
        let Some(leader) = leaders.iter().max_by_key(|n| n.term()) else {
            self.report.violations.push(format!("liveness: no leader at {end}"));
            return;
        };
        let target = leader.last_index();
        if leader.commit_index() != target {
            self.report.violations.push(format!(
                "liveness: leader {} committed {} of {target} at {end}",
                leader.id(),
                leader.commit_index()
            ));
        }
        for n in &self.nodes {
            if n.delivered_index() < leader.commit_index().saturating_sub(2) {
                self.report.violations.push(format!(
                    "liveness: {} delivered {} while leader committed {}",
                    n.id(),
                    n.delivered_index(),
                    leader.commit_index()
                ));
            }
        }
    }
}

/// Two logs that agree on the term at some index must agree on every entry up to it.
pub fn log_matching_violation<T: Clone + PartialEq + std::fmt::Debug>(
    a: &RaftNode<T>,
    b: &RaftNode<T>,
) -> Option<String> {
    let common = a.last_index().min(b.last_index());
    let mut highest_match = 0;
    for i in (1..=common).rev() {
        if a.entry(i).map(|e| e.term) == b.entry(i).map(|e| e.term) {
            highest_match = i;
            break;
        }
    }
    for i in 1..=highest_match {
        if a.entry(i) != b.entry(i) {
            return Some(format!(
                "log matching: {} and {} agree at term index {highest_match} but differ at {i}",
                a.id(),
                b.id()
            ));
        }
    }
    None
}
