//! Trace validation for the per-key session guarantees, R1/R2, and the stable-vector lemma.
//!
//! The checker reads a trace once, front to back, maintaining for every server the writes it
//! has applied per key (reset when the server crashes, since its store is rebuilt from the
//! log) and for every client the writes it has had acknowledged and the writes it has read.
//! Session sets are snapshotted by length when an operation is issued, so an abandoned
//! request served late is judged against the session as it was at issue.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::simnet::SimTime;
use crate::trace::{OpKind, Trace, TraceEvent};
use crate::types::{ClientId, DcId, Key, NodeId, OpRef, PartitionId, RequestId, WriteId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Definition {
    MonotonicRead,
    ReadYourWrite,
    MonotonicWrite,
    WriteFollowsReads,
    /// A write applied somewhere is missing from a replica's final state.
    R1,
    /// A read returned a write the serving replica had not applied.
    R2,
    /// Replicas of one partition ended with different winners or stable vectors.
    Convergence,
    /// A stable-vector component covers an origin index whose write is not applied.
    Lemma1,
}

impl Definition {
    pub const ALL: [Definition; 8] = [
        Definition::MonotonicRead,
        Definition::ReadYourWrite,
        Definition::MonotonicWrite,
        Definition::WriteFollowsReads,
        Definition::R1,
        Definition::R2,
        Definition::Convergence,
        Definition::Lemma1,
    ];

    pub const SESSION: [Definition; 4] = [
        Definition::MonotonicRead,
        Definition::ReadYourWrite,
        Definition::MonotonicWrite,
        Definition::WriteFollowsReads,
    ];

    pub fn short(self) -> &'static str {
        match self {
            Definition::MonotonicRead => "MR",
            Definition::ReadYourWrite => "RYW",
            Definition::MonotonicWrite => "MW",
            Definition::WriteFollowsReads => "WFR",
            Definition::R1 => "R1",
            Definition::R2 => "R2",
            Definition::Convergence => "CONV",
            Definition::Lemma1 => "LEMMA1",
        }
    }
}

/// Which session guarantees to check for each operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Only the guarantees the operation asked for.
    Requested,
    /// All four, whatever was requested. Used to measure what weaker levels give up.
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub def: Definition,
    /// Sequence number of the record at which the violation became observable.
    pub seq: u64,
    pub time_us: u64,
    pub server: Option<NodeId>,
    /// The reading client (MR/RYW/R2) or the writing client of `O` (MW/WFR).
    pub client: Option<ClientId>,
    pub req: Option<RequestId>,
    pub key: Option<Key>,
    /// The write that should (or should not) have been visible.
    pub witness: Option<WriteId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} seq={} t={}", self.def.short(), self.seq, SimTime(self.time_us))?;
        if let Some(s) = self.server {
            write!(f, " server={s}")?;
        }
        if let Some(c) = self.client {
            write!(f, " client={c}")?;
        }
        if let Some(r) = self.req {
            write!(f, " req={r}")?;
        }
        if let Some(k) = &self.key {
            write!(f, " key={k}")?;
        }
        if let Some(w) = self.witness {
            write!(f, " witness={w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub violations: Vec<Violation>,
    pub gets_served: u64,
    pub puts_committed: u64,
    /// False when the trace has no final-state records, so convergence was not checked.
    pub final_state_seen: bool,
}

impl CheckReport {
    pub fn count(&self, def: Definition) -> usize {
        self.violations.iter().filter(|v| v.def == def).count()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<Definition, usize> {
        let mut m = BTreeMap::new();
        for v in &self.violations {
            *m.entry(v.def).or_insert(0) += 1;
        }
        m
    }

    /// One line per violation.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for v in &self.violations {
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

/// What an issued operation needs later: its key, what it asked for, and how much of the
/// client's session existed at issue.
#[derive(Debug, Clone)]
struct Issued {
    key: Key,
    wants: [bool; 4],
    writes_len: usize,
    reads_len: usize,
}

/// Append-only list plus membership.
#[derive(Debug, Default, Clone)]
struct SessionSet {
    list: Vec<WriteId>,
    seen: HashSet<WriteId>,
}

impl SessionSet {
    fn add(&mut self, w: WriteId) {
        if self.seen.insert(w) {
            self.list.push(w);
        }
    }
}

#[derive(Debug, Default)]
struct ServerView {
    committed: HashMap<Key, HashSet<WriteId>>,
    /// key -> forbidden write -> (O, definition) obligations already in force here
    forbidden: HashMap<Key, BTreeMap<WriteId, Vec<(OpRef, Definition)>>>,
    /// per origin datacenter: applied origin indices and how many of the known ones form a
    /// fully applied prefix
    applied: Vec<(HashSet<u64>, usize)>,
}

fn view(servers: &mut HashMap<NodeId, ServerView>, n: NodeId, dcs: usize) -> &mut ServerView {
    servers.entry(n).or_insert_with(|| ServerView {
        applied: vec![(HashSet::new(), 0); dcs],
        ..ServerView::default()
    })
}

/// All origin indices of writes that appear anywhere in the trace, per (partition, origin).
pub(crate) fn known_writes(trace: &Trace) -> BTreeMap<(PartitionId, DcId), Vec<u64>> {
    let mut known: BTreeMap<(PartitionId, DcId), BTreeSet<u64>> = BTreeMap::new();
    for e in trace.events() {
        if let TraceEvent::CommitApplied { write, .. } = e {
            known
                .entry((PartitionId(write.p), DcId(write.dc)))
                .or_default()
                .insert(write.idx);
        }
    }
    known
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect()
}

pub(crate) fn wants_for(event: &TraceEvent, scope: Scope) -> [bool; 4] {
    let all = scope == Scope::All;
    match event {
        TraceEvent::GetIssued { level, .. } => [
            all || level.wants_monotonic_read(),
            all || level.wants_read_your_write(),
            false,
            false,
        ],
        TraceEvent::PutIssued { level, .. } => [
            false,
            false,
            all || level.wants_monotonic_write(),
            all || level.wants_write_follows_reads(),
        ],
        _ => [false; 4],
    }
}

/// Runs every check over `trace`.
pub fn check(trace: &Trace, scope: Scope) -> CheckReport {
    let topo = trace.header.topology();
    let dcs = topo.dcs as usize;
    let known = known_writes(trace);
    let empty: Vec<u64> = Vec::new();

    let mut report = CheckReport::default();
    let mut servers: HashMap<NodeId, ServerView> = HashMap::new();
    let mut issued: HashMap<(ClientId, RequestId), Issued> = HashMap::new();
    let mut client_writes: HashMap<(ClientId, Key), SessionSet> = HashMap::new();
    let mut client_reads: HashMap<(ClientId, Key), SessionSet> = HashMap::new();
    let mut ever: BTreeMap<PartitionId, BTreeSet<WriteId>> = BTreeMap::new();
    let mut write_key: HashMap<WriteId, Key> = HashMap::new();
    let mut finals: BTreeMap<PartitionId, Vec<(NodeId, &Vec<u64>, &Vec<(Key, WriteId)>, u64, u64)>> =
        BTreeMap::new();

    for rec in &trace.records {
        let seq = rec.seq;
        let time_us = rec.time_us;
        match &rec.event {
            e @ TraceEvent::GetIssued { client, req, key, .. }
            | e @ TraceEvent::PutIssued { client, req, key, .. } => {
                let ck = (*client, key.clone());
                issued.insert(
                    (*client, *req),
                    Issued {
                        key: key.clone(),
                        wants: wants_for(e, scope),
                        writes_len: client_writes.get(&ck).map_or(0, |s| s.list.len()),
                        reads_len: client_reads.get(&ck).map_or(0, |s| s.list.len()),
                    },
                );
            }
            TraceEvent::GetReplied {
                client,
                req,
                write: Some(w),
                ..
            } => {
                if let Some(op) = issued.get(&(*client, *req)) {
                    client_reads.entry((*client, op.key.clone())).or_default().add(*w);
                }
            }
            TraceEvent::PutReplied { client, req, write, .. } => {
                if let Some(op) = issued.get(&(*client, *req)) {
                    client_writes.entry((*client, op.key.clone())).or_default().add(*write);
                }
            }
            TraceEvent::CommitApplied {
                node,
                key,
                write,
                writer,
                ..
            } => {
                let v = view(&mut servers, *node, dcs);
                v.committed.entry(key.clone()).or_default().insert(*write);
                ever.entry(PartitionId(write.p)).or_default().insert(*write);
                write_key.entry(*write).or_insert_with(|| key.clone());
                let (applied, prefix) = &mut v.applied[write.dc as usize];
                applied.insert(write.idx);
                let ks = known.get(&(PartitionId(write.p), DcId(write.dc))).unwrap_or(&empty);
                while *prefix < ks.len() && applied.contains(&ks[*prefix]) {
                    *prefix += 1;
                }
                if let Some(o) = writer {
                    let Some(op) = issued.get(&(o.client, o.req)) else {
                        continue;
                    };
                    let ck = (o.client, op.key.clone());
                    let mut add = |list: Option<&SessionSet>, len: usize, def: Definition| {
                        let Some(s) = list else { return };
                        let f = v.forbidden.entry(op.key.clone()).or_default();
                        for w in &s.list[..len] {
                            if w != write {
                                f.entry(*w).or_default().push((*o, def));
                            }
                        }
                    };
                    if op.wants[2] {
                        add(client_writes.get(&ck), op.writes_len, Definition::MonotonicWrite);
                    }
                    if op.wants[3] {
                        add(client_reads.get(&ck), op.reads_len, Definition::WriteFollowsReads);
                    }
                }
            }
            TraceEvent::PutCommittedAtServer { .. } => report.puts_committed += 1,
            TraceEvent::GetServed {
                node,
                client,
                req,
                key,
                write,
                ..
            } => {
                report.gets_served += 1;
                let v = view(&mut servers, *node, dcs);
                let committed = v.committed.get(key);
                let has = |w: &WriteId| committed.is_some_and(|s| s.contains(w));
                let base = Violation {
                    def: Definition::R2,
                    seq,
                    time_us,
                    server: Some(*node),
                    client: Some(*client),
                    req: Some(*req),
                    key: Some(key.clone()),
                    witness: *write,
                };
                if let Some(w) = write {
                    if !has(w) {
                        report.violations.push(base.clone());
                    }
                }
                if let Some(op) = issued.get(&(*client, *req)) {
                    let ck = (*client, key.clone());
                    let mut session = |list: Option<&SessionSet>, len: usize, def: Definition| {
                        let Some(s) = list else { return };
                        for w in &s.list[..len] {
                            if !has(w) {
                                report.violations.push(Violation {
                                    def,
                                    witness: Some(*w),
                                    ..base.clone()
                                });
                            }
                        }
                    };
                    if op.wants[0] {
                        session(client_reads.get(&ck), op.reads_len, Definition::MonotonicRead);
                    }
                    if op.wants[1] {
                        session(client_writes.get(&ck), op.writes_len, Definition::ReadYourWrite);
                    }
                }
                if let Some(w) = write {
                    if let Some(obl) = v.forbidden.get(key).and_then(|f| f.get(w)) {
                        for (o, def) in obl {
                            report.violations.push(Violation {
                                def: *def,
                                client: Some(o.client),
                                req: Some(o.req),
                                witness: Some(*w),
                                ..base.clone()
                            });
                        }
                    }
                }
            }
            TraceEvent::SvSnapshot { node, sv } => {
                let v = view(&mut servers, *node, dcs);
                let p = topo.info(*node).partition;
                for (d, &s) in sv.iter().enumerate() {
                    let ks = known.get(&(p, DcId(d as u16))).unwrap_or(&empty);
                    let prefix = v.applied.get(d).map_or(0, |a| a.1);
                    if prefix < ks.len() && ks[prefix] <= s {
                        report.violations.push(Violation {
                            def: Definition::Lemma1,
                            seq,
                            time_us,
                            server: Some(*node),
                            client: None,
                            req: None,
                            key: None,
                            witness: Some(WriteId::new(p, DcId(d as u16), ks[prefix])),
                        });
                    }
                }
            }
            TraceEvent::Crash { node } => {
                servers.remove(node);
            }
            TraceEvent::FinalState {
                node,
                partition,
                sv,
                winners,
            } => {
                report.final_state_seen = true;
                finals
                    .entry(*partition)
                    .or_default()
                    .push((*node, sv, winners, seq, time_us));
            }
            _ => {}
        }
    }

    for (p, states) in &finals {
        let (_, sv0, w0, _, _) = states[0];
        for &(node, sv, winners, seq, time_us) in states {
            let base = Violation {
                def: Definition::Convergence,
                seq,
                time_us,
                server: Some(node),
                client: None,
                req: None,
                key: None,
                witness: None,
            };
            if sv != sv0 || winners != w0 {
                let witness = winners
                    .iter()
                    .zip(w0.iter())
                    .find(|(a, b)| a != b)
                    .map(|(a, _)| a.1);
                report.violations.push(Violation { witness, ..base.clone() });
            }
            let committed = servers.get(&node).map(|v| &v.committed);
            for w in ever.get(p).into_iter().flatten() {
                let key = &write_key[w];
                let has = committed
                    .and_then(|c| c.get(key))
                    .is_some_and(|s| s.contains(w));
                if !has {
                    report.violations.push(Violation {
                        def: Definition::R1,
                        key: Some(key.clone()),
                        witness: Some(*w),
                        ..base.clone()
                    });
                }
            }
        }
    }
    report.violations.sort();
    report
}

/// Writes stamped with the HLC that nevertheless waited at a server.
pub fn hlc_put_parks(trace: &Trace) -> usize {
    let mut hlc_puts = HashSet::new();
    let mut parks = 0;
    for e in trace.events() {
        match e {
            TraceEvent::PutIssued {
                client,
                req,
                hlc_mode: true,
                ..
            } => {
                hlc_puts.insert((*client, *req));
            }
            TraceEvent::Parked {
                client,
                req,
                op: OpKind::Put,
                ..
            } if hlc_puts.contains(&(*client, *req)) => parks += 1,
            _ => {}
        }
    }
    parks
}
