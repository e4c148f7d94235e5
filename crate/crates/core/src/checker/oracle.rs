//! Brute-force replay of small traces.
//!
//! Every question is answered by rescanning the trace prefix from the start, with no state
//! carried between events. Slow (quadratic) and meant only to cross-check [`super::check`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{known_writes, wants_for, Definition, Scope, Violation};
use crate::hlc::HlcTimestamp;
use crate::protocol::FailReason;
use crate::simnet::{SimTime, Topology};
use crate::trace::{OpKind, Trace, TraceEvent, TraceHeader};
use crate::types::{
    ClientId, DcId, Key, NodeId, OpRef, PartitionId, ReadLevel, RequestId, WriteId, WriteLevel,
};

/// The three set families at one instant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sets {
    pub committed: BTreeMap<(NodeId, Key), BTreeSet<WriteId>>,
    pub client_writes: BTreeMap<(ClientId, Key), BTreeSet<WriteId>>,
    pub client_reads: BTreeMap<(ClientId, Key), BTreeSet<WriteId>>,
}

impl Sets {
    pub fn committed(&self, s: NodeId, k: &Key) -> BTreeSet<WriteId> {
        self.committed.get(&(s, k.clone())).cloned().unwrap_or_default()
    }

    pub fn client_writes(&self, c: ClientId, k: &Key) -> BTreeSet<WriteId> {
        self.client_writes.get(&(c, k.clone())).cloned().unwrap_or_default()
    }

    pub fn client_reads(&self, c: ClientId, k: &Key) -> BTreeSet<WriteId> {
        self.client_reads.get(&(c, k.clone())).cloned().unwrap_or_default()
    }
}

fn issued_key(trace: &Trace, upto: usize, client: ClientId, req: RequestId) -> Option<Key> {
    trace.records[..upto].iter().find_map(|r| match &r.event {
        TraceEvent::GetIssued { client: c, req: q, key, .. }
        | TraceEvent::PutIssued { client: c, req: q, key, .. }
            if *c == client && *q == req =>
        {
            Some(key.clone())
        }
        _ => None,
    })
}

/// CommittedWrites, ClientWrites and ClientReads after the first `upto` records.
pub fn materialize(trace: &Trace, upto: usize) -> Sets {
    let mut sets = Sets::default();
    for (i, r) in trace.records[..upto].iter().enumerate() {
        match &r.event {
            TraceEvent::CommitApplied { node, key, write, .. } => {
                sets.committed.entry((*node, key.clone())).or_default().insert(*write);
            }
            TraceEvent::Crash { node } => sets.committed.retain(|(n, _), _| n != node),
            TraceEvent::PutReplied { client, req, write, .. } => {
                if let Some(k) = issued_key(trace, i, *client, *req) {
                    sets.client_writes.entry((*client, k)).or_default().insert(*write);
                }
            }
            TraceEvent::GetReplied {
                client,
                req,
                write: Some(w),
                ..
            } => {
                if let Some(k) = issued_key(trace, i, *client, *req) {
                    sets.client_reads.entry((*client, k)).or_default().insert(*w);
                }
            }
            _ => {}
        }
    }
    sets
}

/// The sets at every instant: element `i` describes the state after record `i - 1`.
pub fn replay(trace: &Trace) -> Vec<Sets> {
    (0..=trace.records.len()).map(|i| materialize(trace, i)).collect()
}

/// Violations of every check, computed from [`materialize`] alone.
pub fn oracle_check(trace: &Trace, scope: Scope) -> Vec<Violation> {
    let topo = trace.header.topology();
    let known = known_writes(trace);
    let mut out = Vec::new();
    let recs = &trace.records;

    let write_of = |o: OpRef| -> Option<WriteId> {
        recs.iter().find_map(|r| match &r.event {
            TraceEvent::CommitApplied {
                write,
                writer: Some(w),
                ..
            } if *w == o => Some(*write),
            _ => None,
        })
    };

    for (j, rec) in recs.iter().enumerate() {
        let base = Violation {
            def: Definition::R2,
            seq: rec.seq,
            time_us: rec.time_us,
            server: None,
            client: None,
            req: None,
            key: None,
            witness: None,
        };
        match &rec.event {
            TraceEvent::GetServed {
                node,
                client,
                req,
                key,
                write,
                ..
            } => {
                let now = materialize(trace, j);
                let committed = now.committed(*node, key);
                let base = Violation {
                    server: Some(*node),
                    client: Some(*client),
                    req: Some(*req),
                    key: Some(key.clone()),
                    witness: *write,
                    ..base
                };
                if let Some(w) = write {
                    if !committed.contains(w) {
                        out.push(base.clone());
                    }
                }
                // the read itself, judged against the session at its issue
                let issue = recs[..j].iter().position(|r| {
                    matches!(&r.event, TraceEvent::GetIssued { client: c, req: q, .. }
                        if c == client && q == req)
                });
                if let Some(t) = issue {
                    let wants = wants_for(&recs[t].event, scope);
                    let then = materialize(trace, t);
                    let mut session = |set: BTreeSet<WriteId>, def| {
                        for w in set {
                            if !committed.contains(&w) {
                                out.push(Violation {
                                    def,
                                    witness: Some(w),
                                    ..base.clone()
                                });
                            }
                        }
                    };
                    if wants[0] {
                        session(then.client_reads(*client, key), Definition::MonotonicRead);
                    }
                    if wants[1] {
                        session(then.client_writes(*client, key), Definition::ReadYourWrite);
                    }
                }
                // every earlier write O whose commit here forbids what was returned
                let Some(w) = write else { continue };
                for (i, r) in recs[..j].iter().enumerate() {
                    let TraceEvent::PutIssued {
                        client: c,
                        req: q,
                        key: ok,
                        ..
                    } = &r.event
                    else {
                        continue;
                    };
                    if ok != key {
                        continue;
                    }
                    let Some(o) = write_of(OpRef { client: *c, req: *q }) else {
                        continue;
                    };
                    if !committed.contains(&o) || o == *w {
                        continue;
                    }
                    let wants = wants_for(&r.event, scope);
                    let then = materialize(trace, i);
                    let v = Violation {
                        client: Some(*c),
                        req: Some(*q),
                        ..base.clone()
                    };
                    if wants[2] && then.client_writes(*c, key).contains(w) {
                        out.push(Violation {
                            def: Definition::MonotonicWrite,
                            ..v.clone()
                        });
                    }
                    if wants[3] && then.client_reads(*c, key).contains(w) {
                        out.push(Violation {
                            def: Definition::WriteFollowsReads,
                            ..v
                        });
                    }
                }
            }
            TraceEvent::SvSnapshot { node, sv } => {
                let now = materialize(trace, j);
                let p = topo.info(*node).partition;
                let applied: BTreeSet<WriteId> = now
                    .committed
                    .iter()
                    .filter(|((n, _), _)| n == node)
                    .flat_map(|(_, s)| s.iter().copied())
                    .collect();
                for (d, &s) in sv.iter().enumerate() {
                    let d = DcId(d as u16);
                    let first_missing = known
                        .get(&(p, d))
                        .into_iter()
                        .flatten()
                        .map(|&idx| WriteId::new(p, d, idx))
                        .find(|w| !applied.iter().any(|a| a.dc == w.dc && a.idx == w.idx));
                    if let Some(w) = first_missing.filter(|w| w.idx <= s) {
                        out.push(Violation {
                            def: Definition::Lemma1,
                            server: Some(*node),
                            witness: Some(w),
                            ..base.clone()
                        });
                    }
                }
            }
            _ => {}
        }
    }

    // end state
    let end = materialize(trace, recs.len());
    let mut first: BTreeMap<PartitionId, (&Vec<u64>, &Vec<(Key, WriteId)>)> = BTreeMap::new();
    for rec in recs {
        let TraceEvent::FinalState {
            node,
            partition,
            sv,
            winners,
        } = &rec.event
        else {
            continue;
        };
        let base = Violation {
            def: Definition::Convergence,
            seq: rec.seq,
            time_us: rec.time_us,
            server: Some(*node),
            client: None,
            req: None,
            key: None,
            witness: None,
        };
        let (sv0, w0) = *first.entry(*partition).or_insert((sv, winners));
        if sv != sv0 || winners != w0 {
            let witness = winners
                .iter()
                .zip(w0.iter())
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.1);
            out.push(Violation { witness, ..base.clone() });
        }
        let mut ever: BTreeMap<WriteId, Key> = BTreeMap::new();
        for r in recs {
            if let TraceEvent::CommitApplied { key, write, .. } = &r.event {
                if write.p == partition.0 {
                    ever.entry(*write).or_insert_with(|| key.clone());
                }
            }
        }
        for (w, key) in ever {
            if !end.committed(*node, &key).contains(&w) {
                out.push(Violation {
                    def: Definition::R1,
                    key: Some(key),
                    witness: Some(w),
                    ..base.clone()
                });
            }
        }
    }
    out.sort();
    out
}

/// A random, loosely plausible trace of at most `max_records` records over a 2-datacenter,
/// 1-partition, 2-replica topology. Writes reach replicas in arbitrary order, reads may
/// return anything the replica applied (or occasionally anything at all), and replicas crash,
/// so every kind of violation shows up across seeds.
pub fn random_trace(seed: u64, max_records: usize) -> Trace {
    let topo = Topology::new(2, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Trace::new(TraceHeader::new(format!("random-{seed}"), seed, topo));
    let nodes: Vec<NodeId> = topo
        .dc_ids()
        .flat_map(|d| topo.data_nodes(d, PartitionId(0)))
        .collect();
    let keys = [Key::from("a"), Key::from("b")];
    let clients = 3u32;

    #[derive(Clone)]
    enum Out {
        Get { req: RequestId, key: Key, served: Option<Option<WriteId>> },
        Put { req: RequestId, key: Key, write: Option<WriteId> },
    }
    let mut outstanding: Vec<Option<Out>> = vec![None; clients as usize];
    let mut next_req = vec![0u64; clients as usize];
    let mut next_idx = [0u64; 2];
    // every write ever created, with its key and writer
    let mut writes: Vec<(WriteId, Key, Option<OpRef>)> = Vec::new();
    let mut applied: BTreeMap<NodeId, Vec<WriteId>> = BTreeMap::new();
    let mut t = 0u64;
    let budget = max_records.saturating_sub(nodes.len());

    while trace.records.len() + 2 <= budget {
        t += rng.gen_range(1..200);
        let at = SimTime(t);
        let c = rng.gen_range(0..clients);
        let ci = c as usize;
        let client = ClientId(c);
        match rng.gen_range(0..10) {
            // issue, complete, or abandon this client's operation
            0..=3 => match outstanding[ci].clone() {
                None => {
                    next_req[ci] += 1;
                    let req = RequestId(next_req[ci]);
                    let key = keys.choose(&mut rng).expect("keys").clone();
                    let target = *nodes.choose(&mut rng).expect("nodes");
                    if rng.gen_bool(0.5) {
                        let level = *ReadLevel::ALL.choose(&mut rng).expect("levels");
                        trace.push(
                            at,
                            TraceEvent::GetIssued {
                                client,
                                req,
                                key: key.clone(),
                                partition: PartitionId(0),
                                level,
                                target,
                                hrv: vec![0, 0],
                                hwv: vec![0, 0],
                            },
                        );
                        outstanding[ci] = Some(Out::Get { req, key, served: None });
                    } else {
                        let level = *WriteLevel::ALL.choose(&mut rng).expect("levels");
                        trace.push(
                            at,
                            TraceEvent::PutIssued {
                                client,
                                req,
                                key: key.clone(),
                                partition: PartitionId(0),
                                level,
                                hlc_mode: true,
                                target,
                                dt: HlcTimestamp::ZERO,
                            },
                        );
                        outstanding[ci] = Some(Out::Put { req, key, write: None });
                    }
                }
                Some(Out::Get {
                    req,
                    served: Some(write),
                    ..
                }) => {
                    trace.push(
                        at,
                        TraceEvent::GetReplied {
                            client,
                            req,
                            write,
                            dc_id: write.map_or(DcId(0), |w| DcId(w.dc)),
                            log_idx: write.map_or(0, |w| w.idx),
                            t: HlcTimestamp::ZERO,
                        },
                    );
                    outstanding[ci] = None;
                }
                Some(Out::Put {
                    req,
                    write: Some(write),
                    ..
                }) => {
                    trace.push(
                        at,
                        TraceEvent::PutReplied {
                            client,
                            req,
                            write,
                            log_idx: write.idx,
                            t: HlcTimestamp::ZERO,
                        },
                    );
                    outstanding[ci] = None;
                }
                Some(o) => {
                    if rng.gen_bool(0.2) {
                        let (req, op) = match o {
                            Out::Get { req, .. } => (req, OpKind::Get),
                            Out::Put { req, .. } => (req, OpKind::Put),
                        };
                        trace.push(
                            at,
                            TraceEvent::OpFailed {
                                client,
                                req,
                                op,
                                reason: FailReason::ClientTimeout,
                            },
                        );
                        outstanding[ci] = None;
                    }
                }
            },
            // serve a pending read somewhere
            4 => {
                if let Some(Out::Get { req, key, served: None }) = outstanding[ci].clone() {
                    let node = *nodes.choose(&mut rng).expect("nodes");
                    let here: Vec<WriteId> = applied
                        .get(&node)
                        .into_iter()
                        .flatten()
                        .copied()
                        .filter(|w| writes.iter().any(|(x, k, _)| x == w && *k == key))
                        .collect();
                    let write = if rng.gen_bool(0.05) {
                        writes.iter().filter(|(_, k, _)| *k == key).map(|x| x.0).last()
                    } else if here.is_empty() || rng.gen_bool(0.2) {
                        None
                    } else {
                        here.choose(&mut rng).copied()
                    };
                    trace.push(
                        at,
                        TraceEvent::GetServed {
                            node,
                            client,
                            req,
                            key: key.clone(),
                            write,
                            t: HlcTimestamp::ZERO,
                            log_idx: 0,
                            sv: vec![0, 0],
                        },
                    );
                    outstanding[ci] = Some(Out::Get {
                        req,
                        key,
                        served: Some(write),
                    });
                }
            }
            // commit a pending write at its origin
            5 => {
                if let Some(Out::Put { req, key, write: None }) = outstanding[ci].clone() {
                    let node = *nodes.choose(&mut rng).expect("nodes");
                    let dc = topo.info(node).dc;
                    next_idx[dc.index()] += rng.gen_range(1..=2);
                    let write = WriteId::new(PartitionId(0), dc, next_idx[dc.index()]);
                    let writer = Some(OpRef { client, req });
                    writes.push((write, key.clone(), writer));
                    applied.entry(node).or_default().push(write);
                    trace.push(
                        at,
                        TraceEvent::CommitApplied {
                            node,
                            key: key.clone(),
                            write,
                            t: HlcTimestamp::ZERO,
                            writer,
                        },
                    );
                    outstanding[ci] = Some(Out::Put {
                        req,
                        key,
                        write: Some(write),
                    });
                }
            }
            // spread an existing write to another replica, in any order
            6 | 7 => {
                if let Some((write, key, writer)) = writes.choose(&mut rng).cloned() {
                    let node = *nodes.choose(&mut rng).expect("nodes");
                    let a = applied.entry(node).or_default();
                    if !a.contains(&write) {
                        a.push(write);
                        trace.push(
                            at,
                            TraceEvent::CommitApplied {
                                node,
                                key,
                                write,
                                t: HlcTimestamp::ZERO,
                                writer,
                            },
                        );
                    }
                }
            }
            8 => {
                let node = *nodes.choose(&mut rng).expect("nodes");
                let mut sv = vec![0u64; 2];
                for w in applied.get(&node).into_iter().flatten() {
                    sv[w.dc as usize] = sv[w.dc as usize].max(w.idx);
                }
                trace.push(at, TraceEvent::SvSnapshot { node, sv });
            }
            _ => {
                if rng.gen_bool(0.3) {
                    let node = *nodes.choose(&mut rng).expect("nodes");
                    applied.remove(&node);
                    trace.push(at, TraceEvent::Crash { node });
                    trace.push(at, TraceEvent::Restart { node });
                }
            }
        }
    }

    if rng.gen_bool(0.5) && trace.records.len() + nodes.len() <= max_records {
        t += 1;
        for &node in &nodes {
            let mut sv = vec![0u64; 2];
            let mut winners: BTreeMap<Key, WriteId> = BTreeMap::new();
            for w in applied.get(&node).into_iter().flatten() {
                sv[w.dc as usize] = sv[w.dc as usize].max(w.idx);
                let key = &writes.iter().find(|(x, _, _)| x == w).expect("known").1;
                let e = winners.entry(key.clone()).or_insert(*w);
                if (w.idx, w.dc) > (e.idx, e.dc) {
                    *e = *w;
                }
            }
            trace.push(
                SimTime(t),
                TraceEvent::FinalState {
                    node,
                    partition: PartitionId(0),
                    sv,
                    winners: winners.into_iter().collect(),
                },
            );
        }
    }
    trace
}
