//! Data servers and XC learners.
//!
//! A [`DataServer`] is one replica of a (datacenter, partition) Raft group. Any replica serves
//! reads once its stable vector covers the request's vectors; the leader stamps and proposes
//! writes and ingests replication streams from other datacenters. An [`XcServer`] is the
//! group's non-voting learner that forwards locally originated commits to the other
//! datacenters as a dense, acknowledged stream.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hlc::{HlcClock, HlcError, HlcTimestamp};
use crate::protocol::{
    ClientReply, ClientRequest, FailReason, GetReply, GetRequest, PutReply, PutRequest, Replicate,
    ReplyBody, XdcMessage,
};
use crate::replicated_log::{EntryPayload, LogEntry, Output, RaftConfig, RaftMessage, RaftNode};
use crate::simnet::{SimTime, Topology};
use crate::store::{ApplyOutcome, Store, StoreError};
use crate::trace::{OpKind, TraceEvent};
use crate::types::{
    ClientId, DcId, Key, NodeId, OpRef, PartitionId, Partitioner, ReplicationPayload, RequestId,
    Version, WriteId,
};

/// Simulated time plus the node's physical clock reading (ms) at that instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Now {
    pub at: SimTime,
    pub pc: u64,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub topology: Topology,
    /// Ingest replication streams strictly in order. Turning this off is a negative control.
    pub xdc_fifo: bool,
    pub park_timeout_us: Option<u64>,
    pub gc_window: usize,
    /// XC resends its unacknowledged tail after this long without progress.
    pub xc_retry_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Raft {
        to: NodeId,
        msg: RaftMessage<ReplicationPayload>,
    },
    Reply {
        client: ClientId,
        reply: ClientReply,
    },
    Xdc {
        to: NodeId,
        msg: XdcMessage,
    },
    Trace(TraceEvent),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error(transparent)]
    Hlc(#[from] HlcError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
enum ParkedOp {
    Get(GetRequest),
    Put(PutRequest),
}

#[derive(Debug, Clone)]
struct Parked {
    op: ParkedOp,
    deadline: Option<SimTime>,
}

impl Parked {
    fn vectors(&self) -> (&[u64], &[u64]) {
        match &self.op {
            ParkedOp::Get(g) => (&g.hrv, &g.hwv),
            ParkedOp::Put(p) => {
                let (r, w) = p.blocking.as_ref().expect("only physical-clock writes park");
                (r, w)
            }
        }
    }

    fn ids(&self) -> (ClientId, RequestId) {
        match &self.op {
            ParkedOp::Get(g) => (g.client, g.req),
            ParkedOp::Put(p) => (p.client, p.req),
        }
    }
}

#[derive(Debug, Clone)]
struct PendingPut {
    term: u64,
    client: ClientId,
    req: RequestId,
    key: Key,
    t: HlcTimestamp,
}

/// `∃ i: sv[i] < hrv[i] ∨ sv[i] < hwv[i]`
pub fn must_wait(sv: &[u64], hrv: &[u64], hwv: &[u64]) -> bool {
    sv.iter().enumerate().any(|(i, s)| {
        *s < hrv.get(i).copied().unwrap_or(0) || *s < hwv.get(i).copied().unwrap_or(0)
    })
}

#[derive(Debug, Clone)]
pub struct DataServer {
    id: NodeId,
    dc: DcId,
    partition: PartitionId,
    cfg: ServerConfig,
    partitioner: Partitioner,
    raft: RaftNode<ReplicationPayload>,
    store: Store,
    hlc: HlcClock,
    /// Clock for writes stamped without the HLC: physical time floored by the key's winner.
    physical_stamps: HlcClock,
    parked: Vec<Parked>,
    pending_puts: BTreeMap<u64, PendingPut>,
    /// Highest stream position per origin already in this leader's log.
    appended_seq: Vec<u64>,
    held_back: Vec<BTreeMap<u64, ReplicationPayload>>,
    last_ack_sent: Vec<u64>,
    was_leader: bool,
}

impl DataServer {
    pub fn new(
        id: NodeId,
        cfg: ServerConfig,
        raft_cfg: RaftConfig,
        seed: u64,
        bootstrap_leader: Option<NodeId>,
        now: SimTime,
    ) -> Self {
        let info = cfg.topology.info(id);
        assert!(!info.is_xc, "{id} is an XC slot");
        let raft = match bootstrap_leader {
            Some(l) => RaftNode::bootstrapped(id, raft_cfg, seed, l, now),
            None => RaftNode::new(id, raft_cfg, seed, now),
        };
        let dcs = cfg.topology.dcs as usize;
        let mut s = DataServer {
            id,
            dc: info.dc,
            partition: info.partition,
            partitioner: Partitioner::new(cfg.topology.partitions),
            store: Store::new(info.partition, info.dc, cfg.topology.dcs, cfg.gc_window),
            cfg,
            raft,
            hlc: HlcClock::new(),
            physical_stamps: HlcClock::new(),
            parked: Vec::new(),
            pending_puts: BTreeMap::new(),
            appended_seq: vec![0; dcs],
            held_back: vec![BTreeMap::new(); dcs],
            last_ack_sent: vec![0; dcs],
            was_leader: false,
        };
        s.was_leader = s.raft.is_leader();
        s
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn dc(&self) -> DcId {
        self.dc
    }

    pub fn partition(&self) -> PartitionId {
        self.partition
    }

    pub fn raft(&self) -> &RaftNode<ReplicationPayload> {
        &self.raft
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn hlc(&self) -> HlcTimestamp {
        self.hlc.current()
    }

    pub fn parked_len(&self) -> usize {
        self.parked.len()
    }

    pub fn pending_puts(&self) -> usize {
        self.pending_puts.len()
    }

    pub fn held_back(&self) -> usize {
        self.held_back.iter().map(BTreeMap::len).sum()
    }

    /// Crash recovery: only the Raft term, vote and log survive.
    pub fn restart(&mut self, now: SimTime) {
        self.raft.restart(now);
        let t = self.cfg.topology;
        self.store = Store::new(self.partition, self.dc, t.dcs, self.cfg.gc_window);
        self.hlc = HlcClock::new();
        self.physical_stamps = HlcClock::new();
        self.parked.clear();
        self.pending_puts.clear();
        self.appended_seq.iter_mut().for_each(|x| *x = 0);
        self.held_back.iter_mut().for_each(BTreeMap::clear);
        self.last_ack_sent.iter_mut().for_each(|x| *x = 0);
        self.was_leader = false;
    }

    pub fn final_state(&self) -> TraceEvent {
        TraceEvent::FinalState {
            node: self.id,
            partition: self.partition,
            sv: self.store.sv().to_vec(),
            winners: self.store.winners().into_iter().collect(),
        }
    }

    fn reply(&self, out: &mut Vec<Effect>, client: ClientId, req: RequestId, body: ReplyBody) {
        out.push(Effect::Reply {
            client,
            reply: ClientReply { req, body },
        });
    }

    pub fn handle_request(
        &mut self,
        now: Now,
        req: ClientRequest,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        let key = match &req {
            ClientRequest::Get(g) => &g.key,
            ClientRequest::Put(p) => &p.key,
        };
        if self.partitioner.partition_of(key) != self.partition {
            self.reply(out, req.client(), req.req(), ReplyBody::Failed(FailReason::WrongPartition));
            return Ok(());
        }
        match req {
            ClientRequest::Get(g) => {
                if must_wait(self.store.sv(), &g.hrv, &g.hwv) {
                    self.park(now, ParkedOp::Get(g), out);
                } else {
                    self.serve_get(g, out);
                }
                Ok(())
            }
            ClientRequest::Put(p) => self.start_put(now, p, out),
        }
    }

    fn park(&mut self, now: Now, op: ParkedOp, out: &mut Vec<Effect>) {
        let p = Parked {
            op,
            deadline: self.cfg.park_timeout_us.map(|d| now.at + d),
        };
        let (client, req) = p.ids();
        let kind = match p.op {
            ParkedOp::Get(_) => OpKind::Get,
            ParkedOp::Put(_) => OpKind::Put,
        };
        out.push(Effect::Trace(TraceEvent::Parked {
            node: self.id,
            client,
            req,
            op: kind,
        }));
        self.parked.push(p);
    }

    fn serve_get(&self, g: GetRequest, out: &mut Vec<Effect>) {
        let reply = match self.store.read_latest(&g.key) {
            Some(v) => GetReply {
                value: Some(v.version.value.clone()),
                write: Some(v.write),
                dc_id: v.version.dc_id,
                log_idx: self.store.sv()[v.version.dc_id.index()],
                t: v.version.t,
            },
            None => GetReply {
                value: None,
                write: None,
                dc_id: self.dc,
                log_idx: 0,
                t: HlcTimestamp::ZERO,
            },
        };
        out.push(Effect::Trace(TraceEvent::GetServed {
            node: self.id,
            client: g.client,
            req: g.req,
            key: g.key,
            write: reply.write,
            t: reply.t,
            log_idx: reply.log_idx,
            sv: self.store.sv().to_vec(),
        }));
        self.reply(out, g.client, g.req, ReplyBody::Get(reply));
    }

    fn not_leader(&self) -> ReplyBody {
        ReplyBody::Failed(FailReason::NotLeader {
            hint: self.raft.leader_hint(),
        })
    }

    fn start_put(&mut self, now: Now, p: PutRequest, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        if !self.raft.is_leader() {
            let body = self.not_leader();
            self.reply(out, p.client, p.req, body);
            return Ok(());
        }
        if let Some((hrv, hwv)) = &p.blocking {
            if must_wait(self.store.sv(), hrv, hwv) {
                self.park(now, ParkedOp::Put(p), out);
                return Ok(());
            }
        }
        self.stamp_and_propose(now, p, out)
    }

    fn stamp_and_propose(&mut self, now: Now, p: PutRequest, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        let t = if p.blocking.is_none() {
            self.hlc.merge(p.dt, now.pc)?
        } else {
            let floor = self
                .store
                .read_latest(&p.key)
                .map_or(HlcTimestamp::ZERO, |v| v.version.t);
            self.physical_stamps.merge(floor, now.pc)?
        };
        let payload = ReplicationPayload {
            key: p.key.clone(),
            version: Version {
                value: p.value,
                t,
                dc_id: self.dc,
            },
            origin_dc: self.dc,
            origin_idx: None,
            origin_seq: 0,
            writer: Some(OpRef {
                client: p.client,
                req: p.req,
            }),
        };
        match self.raft.propose(payload, now.at) {
            Ok((index, term, o)) => {
                self.pending_puts.insert(
                    index,
                    PendingPut {
                        term,
                        client: p.client,
                        req: p.req,
                        key: p.key,
                        t,
                    },
                );
                self.absorb_raft(now, o, out)
            }
            Err(_) => {
                let body = self.not_leader();
                self.reply(out, p.client, p.req, body);
                Ok(())
            }
        }
    }

    pub fn handle_raft(
        &mut self,
        now: Now,
        from: NodeId,
        msg: RaftMessage<ReplicationPayload>,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        let o = self.raft.handle_message(from, msg, now.at);
        self.absorb_raft(now, o, out)
    }

    pub fn tick(&mut self, now: Now, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        let o = self.raft.tick(now.at);
        self.absorb_raft(now, o, out)?;
        if self.parked.iter().any(|p| p.deadline.is_some_and(|d| d <= now.at)) {
            let (expired, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
                .into_iter()
                .partition(|p| p.deadline.is_some_and(|d| d <= now.at));
            self.parked = keep;
            for p in expired {
                let (client, req) = p.ids();
                self.reply(out, client, req, ReplyBody::Failed(FailReason::ParkTimeout));
            }
        }
        if self.raft.is_leader() {
            for d in self.cfg.topology.dc_ids() {
                if d == self.dc {
                    continue;
                }
                let applied = self.store.stream_pos(d);
                if applied != self.last_ack_sent[d.index()] {
                    self.last_ack_sent[d.index()] = applied;
                    out.push(Effect::Xdc {
                        to: self.cfg.topology.xc(d, self.partition),
                        msg: XdcMessage::Ack {
                            from_dc: self.dc,
                            applied,
                        },
                    });
                }
            }
        }
        Ok(())
    }

    fn absorb_raft(
        &mut self,
        now: Now,
        o: Output<ReplicationPayload>,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        for (to, msg) in o.messages {
            out.push(Effect::Raft { to, msg });
        }
        let mut applied_any = false;
        for e in o.committed {
            applied_any |= self.on_commit(e, out)?;
        }
        self.check_role(out);
        if applied_any {
            self.release_parked(now, out)?;
        }
        Ok(())
    }

    fn check_role(&mut self, out: &mut Vec<Effect>) {
        let leader = self.raft.is_leader();
        if self.was_leader && !leader {
            let hint = self.raft.leader_hint();
            let (puts, gets): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
                .into_iter()
                .partition(|p| matches!(p.op, ParkedOp::Put(_)));
            self.parked = gets;
            for p in puts {
                let (client, req) = p.ids();
                self.reply(out, client, req, ReplyBody::Failed(FailReason::NotLeader { hint }));
            }
            self.held_back.iter_mut().for_each(BTreeMap::clear);
        }
        if !self.was_leader && leader {
            self.appended_seq.iter_mut().for_each(|x| *x = 0);
            for e in self.raft.log() {
                if let EntryPayload::Data(p) = &e.payload {
                    if p.origin_dc != self.dc {
                        let s = &mut self.appended_seq[p.origin_dc.index()];
                        *s = (*s).max(p.origin_seq);
                    }
                }
            }
            self.held_back.iter_mut().for_each(BTreeMap::clear);
            self.last_ack_sent.iter_mut().for_each(|x| *x = 0);
        }
        self.was_leader = leader;
    }

    /// Applies one committed entry; true if it changed the stable vector.
    fn on_commit(&mut self, e: LogEntry<ReplicationPayload>, out: &mut Vec<Effect>) -> Result<bool, ServerError> {
        let mut applied = false;
        match &e.payload {
            EntryPayload::Noop => self.store.skip(e.index)?,
            EntryPayload::Data(p) => match self.store.apply_commit(p, e.index)? {
                ApplyOutcome::Applied(write) => {
                    out.push(Effect::Trace(TraceEvent::CommitApplied {
                        node: self.id,
                        key: p.key.clone(),
                        write,
                        t: p.version.t,
                        writer: p.writer,
                    }));
                    out.push(Effect::Trace(TraceEvent::SvSnapshot {
                        node: self.id,
                        sv: self.store.sv().to_vec(),
                    }));
                    applied = true;
                }
                ApplyOutcome::Deduplicated(write) => {
                    out.push(Effect::Trace(TraceEvent::Deduplicated { node: self.id, write }));
                }
            },
        }
        if let Some(pp) = self.pending_puts.remove(&e.index) {
            let body = if pp.term == e.term {
                let write = WriteId::new(self.partition, self.dc, e.index);
                out.push(Effect::Trace(TraceEvent::PutCommittedAtServer {
                    node: self.id,
                    client: pp.client,
                    req: pp.req,
                    key: pp.key,
                    write,
                    t: pp.t,
                }));
                ReplyBody::Put(PutReply {
                    write,
                    dc_id: self.dc,
                    log_idx: e.index,
                    t: pp.t,
                })
            } else {
                ReplyBody::Failed(FailReason::Overwritten)
            };
            self.reply(out, pp.client, pp.req, body);
        }
        Ok(applied)
    }

    fn release_parked(&mut self, now: Now, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        loop {
            let sv = self.store.sv();
            let Some(i) = self.parked.iter().position(|p| {
                let (r, w) = p.vectors();
                !must_wait(sv, r, w)
            }) else {
                return Ok(());
            };
            match self.parked.remove(i).op {
                ParkedOp::Get(g) => self.serve_get(g, out),
                ParkedOp::Put(p) => {
                    if self.raft.is_leader() {
                        self.stamp_and_propose(now, p, out)?;
                    } else {
                        let body = self.not_leader();
                        self.reply(out, p.client, p.req, body);
                    }
                }
            }
        }
    }

    pub fn handle_xdc(
        &mut self,
        now: Now,
        from: NodeId,
        msg: XdcMessage,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        let XdcMessage::Replicate(Replicate { seq, payload }) = msg else {
            return Ok(());
        };
        let origin = payload.origin_dc;
        let applied = self.store.stream_pos(origin);
        if !self.raft.is_leader() {
            out.push(Effect::Xdc {
                to: from,
                msg: XdcMessage::Nack {
                    from_dc: self.dc,
                    applied,
                    hint: self.raft.leader_hint(),
                },
            });
            return Ok(());
        }
        let o = origin.index();
        if !self.cfg.xdc_fifo {
            self.appended_seq[o] = self.appended_seq[o].max(seq);
            return self.propose_replicated(now, payload, out);
        }
        if seq <= applied {
            out.push(Effect::Xdc {
                to: from,
                msg: XdcMessage::Ack {
                    from_dc: self.dc,
                    applied,
                },
            });
            return Ok(());
        }
        if seq <= self.appended_seq[o] {
            return Ok(());
        }
        if seq > self.appended_seq[o] + 1 {
            self.held_back[o].insert(seq, payload);
            return Ok(());
        }
        self.appended_seq[o] = seq;
        self.propose_replicated(now, payload, out)?;
        while let Some(next) = self.held_back[o].remove(&(self.appended_seq[o] + 1)) {
            if !self.raft.is_leader() {
                break;
            }
            self.appended_seq[o] += 1;
            self.propose_replicated(now, next, out)?;
        }
        let floor = self.appended_seq[o];
        self.held_back[o].retain(|s, _| *s > floor);
        Ok(())
    }

    fn propose_replicated(
        &mut self,
        now: Now,
        payload: ReplicationPayload,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        debug_assert!(payload.origin_idx.is_some());
        match self.raft.propose(payload, now.at) {
            Ok((_, _, o)) => self.absorb_raft(now, o, out),
            Err(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct Stream {
    acked: u64,
    next: u64,
    target: Option<NodeId>,
    last_progress: SimTime,
}

impl Stream {
    fn new(now: SimTime) -> Self {
        Stream {
            acked: 0,
            next: 1,
            target: None,
            last_progress: now,
        }
    }
}

#[derive(Debug, Clone)]
pub struct XcServer {
    id: NodeId,
    dc: DcId,
    cfg: ServerConfig,
    raft: RaftNode<ReplicationPayload>,
    /// Locally originated commits in log order; position `i` has stream seq `i + 1`.
    outbox: Vec<ReplicationPayload>,
    streams: Vec<Stream>,
}

impl XcServer {
    pub fn new(
        id: NodeId,
        cfg: ServerConfig,
        raft_cfg: RaftConfig,
        seed: u64,
        bootstrap_leader: Option<NodeId>,
        now: SimTime,
    ) -> Self {
        let info = cfg.topology.info(id);
        assert!(info.is_xc, "{id} is not an XC slot");
        let raft = match bootstrap_leader {
            Some(l) => RaftNode::bootstrapped(id, raft_cfg, seed, l, now),
            None => RaftNode::new(id, raft_cfg, seed, now),
        };
        XcServer {
            id,
            dc: info.dc,
            streams: (0..cfg.topology.dcs).map(|_| Stream::new(now)).collect(),
            cfg,
            raft,
            outbox: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn raft(&self) -> &RaftNode<ReplicationPayload> {
        &self.raft
    }

    pub fn outbox_len(&self) -> u64 {
        self.outbox.len() as u64
    }

    /// Every other datacenter has acknowledged everything forwarded so far.
    pub fn fully_acked(&self) -> bool {
        let n = self.outbox_len();
        self.streams
            .iter()
            .enumerate()
            .all(|(d, s)| d == self.dc.index() || s.acked >= n)
    }

    pub fn acked(&self, d: DcId) -> u64 {
        self.streams[d.index()].acked
    }

    /// Loses the delivery cursor and the learner log; both are rebuilt from the group.
    pub fn restart(&mut self, now: SimTime) {
        self.raft.restart(now);
        self.outbox.clear();
        self.streams = (0..self.cfg.topology.dcs).map(|_| Stream::new(now)).collect();
    }

    /// `leaders[d]` is the current leader of this partition's group in datacenter `d`.
    pub fn handle_raft(
        &mut self,
        now: SimTime,
        from: NodeId,
        msg: RaftMessage<ReplicationPayload>,
        leaders: &[Option<NodeId>],
        out: &mut Vec<Effect>,
    ) {
        let o = self.raft.handle_message(from, msg, now);
        for (to, msg) in o.messages {
            out.push(Effect::Raft { to, msg });
        }
        let before = self.outbox_len();
        for e in o.committed {
            self.on_commit(e);
        }
        if self.outbox_len() > before {
            for s in &mut self.streams {
                if s.acked >= before {
                    s.last_progress = now;
                }
            }
            self.pump(leaders, out);
        }
    }

    fn on_commit(&mut self, e: LogEntry<ReplicationPayload>) {
        let EntryPayload::Data(mut p) = e.payload else {
            return;
        };
        if p.origin_dc != self.dc {
            return;
        }
        p.origin_idx = Some(e.index);
        p.origin_seq = self.outbox_len() + 1;
        self.outbox.push(p);
    }

    fn pump(&mut self, leaders: &[Option<NodeId>], out: &mut Vec<Effect>) {
        for (d, s) in self.streams.iter_mut().enumerate() {
            if d == self.dc.index() {
                continue;
            }
            let target = leaders.get(d).copied().flatten();
            if target != s.target {
                s.target = target;
                s.next = s.acked + 1;
            }
            let Some(to) = target else { continue };
            while s.next <= self.outbox.len() as u64 {
                out.push(Effect::Xdc {
                    to,
                    msg: XdcMessage::Replicate(Replicate {
                        seq: s.next,
                        payload: self.outbox[s.next as usize - 1].clone(),
                    }),
                });
                s.next += 1;
            }
        }
    }

    pub fn handle_xdc(&mut self, now: SimTime, msg: XdcMessage, leaders: &[Option<NodeId>], out: &mut Vec<Effect>) {
        match msg {
            XdcMessage::Ack { from_dc, applied } => {
                let s = &mut self.streams[from_dc.index()];
                if applied > s.acked {
                    s.acked = applied;
                    s.last_progress = now;
                }
                s.next = s.next.max(s.acked + 1);
            }
            XdcMessage::Nack { from_dc, applied, .. } => {
                let s = &mut self.streams[from_dc.index()];
                s.acked = s.acked.max(applied);
                s.next = s.acked + 1;
                // forget the target so the next pump re-reads the registry
                s.target = None;
                s.last_progress = now;
                self.pump(leaders, out);
            }
            XdcMessage::Replicate(_) => {}
        }
    }

    pub fn tick(&mut self, now: SimTime, leaders: &[Option<NodeId>], out: &mut Vec<Effect>) {
        let o = self.raft.tick(now);
        for (to, msg) in o.messages {
            out.push(Effect::Raft { to, msg });
        }
        let n = self.outbox_len();
        let retry = self.cfg.xc_retry_us;
        for s in &mut self.streams {
            if s.acked < n && now.saturating_sub(s.last_progress) >= retry {
                s.next = s.acked + 1;
                s.last_progress = now;
            }
        }
        self.pump(leaders, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hlc::HlcTimestamp;
    use crate::types::workload_key;
    use bytes::Bytes;

    fn cfg(dcs: u16) -> ServerConfig {
        ServerConfig {
            topology: Topology::new(dcs, 1, 1),
            xdc_fifo: true,
            park_timeout_us: None,
            gc_window: 4,
            xc_retry_us: 50_000,
        }
    }

    /// Single-replica group in `dc` with its XC learner, leader bootstrapped.
    fn group(dcs: u16, dc: u16) -> (DataServer, XcServer) {
        let c = cfg(dcs);
        let data = c.topology.data_nodes(DcId(dc), PartitionId(0))[0];
        let xc = c.topology.xc(DcId(dc), PartitionId(0));
        let rc = RaftConfig::with_tick(vec![data], vec![xc], 1000);
        (
            DataServer::new(data, c.clone(), rc.clone(), 1, Some(data), SimTime::ZERO),
            XcServer::new(xc, c, rc, 2, Some(data), SimTime::ZERO),
        )
    }

    fn now(ms: u64, pc: u64) -> Now {
        Now {
            at: SimTime::from_ms(ms),
            pc,
        }
    }

    fn get(hrv: Vec<u64>, hwv: Vec<u64>) -> ClientRequest {
        ClientRequest::Get(GetRequest {
            client: ClientId(1),
            req: RequestId(1),
            key: workload_key(1),
            hrv,
            hwv,
        })
    }

    fn put(dt: HlcTimestamp, blocking: Option<(Vec<u64>, Vec<u64>)>) -> ClientRequest {
        ClientRequest::Put(PutRequest {
            client: ClientId(1),
            req: RequestId(2),
            key: workload_key(1),
            value: Bytes::from_static(b"v"),
            dt,
            blocking,
        })
    }

    fn replies(out: &[Effect]) -> Vec<&ReplyBody> {
        out.iter()
            .filter_map(|e| match e {
                Effect::Reply { reply, .. } => Some(&reply.body),
                _ => None,
            })
            .collect()
    }

    fn remote_payload(origin: u16, idx: u64, seq: u64) -> ReplicationPayload {
        ReplicationPayload {
            key: workload_key(1),
            version: Version {
                value: Bytes::from_static(b"r"),
                t: HlcTimestamp::new(1, 0),
                dc_id: DcId(origin),
            },
            origin_dc: DcId(origin),
            origin_idx: Some(idx),
            origin_seq: seq,
            writer: None,
        }
    }

    fn replicate(s: &mut DataServer, origin: u16, idx: u64, seq: u64) -> Vec<Effect> {
        let mut out = Vec::new();
        s.handle_xdc(
            now(1, 1),
            NodeId(99),
            XdcMessage::Replicate(Replicate {
                seq,
                payload: remote_payload(origin, idx, seq),
            }),
            &mut out,
        )
        .unwrap();
        out
    }

    #[test]
    fn wait_predicate_examples() {
        assert!(!must_wait(&[3, 7], &[2, 7], &[0, 0]));
        assert!(must_wait(&[3, 7], &[4, 0], &[0, 0]));
        assert!(!must_wait(&[0, 0], &[0, 0], &[0, 0]));
        assert!(must_wait(&[3, 7], &[0, 0], &[0, 8]));
    }

    #[test]
    fn get_parks_until_replication_catches_up() {
        let (mut s, _) = group(2, 0);
        let mut out = Vec::new();
        s.handle_request(now(1, 1), get(vec![0, 2], vec![0, 0]), &mut out).unwrap();
        assert!(matches!(out[0], Effect::Trace(TraceEvent::Parked { op: OpKind::Get, .. })));
        assert!(replies(&out).is_empty());
        assert!(replies(&replicate(&mut s, 1, 1, 1)).is_empty(), "sv[1]=1 still short of 2");
        let out = replicate(&mut s, 1, 2, 2);
        let r = replies(&out);
        assert_eq!(r.len(), 1);
        let ReplyBody::Get(g) = r[0] else { panic!() };
        assert_eq!((g.dc_id, g.log_idx), (DcId(1), 2));
        assert_eq!(s.parked_len(), 0);
    }

    #[test]
    fn eventual_get_never_parks() {
        let (mut s, _) = group(2, 0);
        let mut out = Vec::new();
        s.handle_request(now(1, 1), get(vec![0, 0], vec![0, 0]), &mut out).unwrap();
        let r = replies(&out);
        assert!(matches!(r[0], ReplyBody::Get(GetReply { value: None, .. })));
    }

    #[test]
    fn hlc_put_stamps_above_dependency_and_replies_on_commit() {
        let (mut s, _) = group(1, 0);
        s.hlc = HlcClock::with_state(HlcTimestamp::new(95, 1));
        let mut out = Vec::new();
        s.handle_request(now(1, 90), put(HlcTimestamp::new(100, 2), None), &mut out).unwrap();
        let r = replies(&out);
        let ReplyBody::Put(p) = r[0] else { panic!("{r:?}") };
        assert_eq!(p.t, HlcTimestamp::new(100, 3));
        assert_eq!(p.log_idx, 1);
        assert!(out.iter().any(|e| matches!(e, Effect::Trace(TraceEvent::PutCommittedAtServer { .. }))));

        let (mut s, _) = group(1, 0);
        s.hlc = HlcClock::with_state(HlcTimestamp::new(40, 0));
        let mut out = Vec::new();
        s.handle_request(now(1, 50), put(HlcTimestamp::ZERO, None), &mut out).unwrap();
        let ReplyBody::Put(p) = replies(&out)[0] else { panic!() };
        assert_eq!(p.t, HlcTimestamp::new(50, 0));
    }

    #[test]
    fn put_reply_waits_for_majority_commit() {
        let c = ServerConfig {
            topology: Topology::new(1, 1, 3),
            ..cfg(1)
        };
        let nodes = c.topology.data_nodes(DcId(0), PartitionId(0));
        let rc = RaftConfig::with_tick(nodes.clone(), vec![c.topology.xc(DcId(0), PartitionId(0))], 1000);
        let mut s = DataServer::new(nodes[0], c, rc, 1, Some(nodes[0]), SimTime::ZERO);
        let mut out = Vec::new();
        s.handle_request(now(1, 1), put(HlcTimestamp::ZERO, None), &mut out).unwrap();
        assert!(replies(&out).is_empty());
        assert_eq!(s.pending_puts(), 1);
        let mut out = Vec::new();
        s.handle_raft(
            now(2, 2),
            nodes[1],
            RaftMessage::AppendEntriesReply {
                term: 1,
                success: true,
                match_index: 1,
            },
            &mut out,
        )
        .unwrap();
        assert!(matches!(replies(&out)[0], ReplyBody::Put(PutReply { log_idx: 1, .. })));
    }

    #[test]
    fn follower_refuses_writes_with_hint() {
        let c = ServerConfig {
            topology: Topology::new(1, 1, 3),
            ..cfg(1)
        };
        let nodes = c.topology.data_nodes(DcId(0), PartitionId(0));
        let rc = RaftConfig::with_tick(nodes.clone(), vec![], 1000);
        let mut s = DataServer::new(nodes[1], c, rc, 1, Some(nodes[0]), SimTime::ZERO);
        let mut out = Vec::new();
        s.handle_request(now(1, 1), put(HlcTimestamp::ZERO, None), &mut out).unwrap();
        assert_eq!(
            replies(&out),
            vec![&ReplyBody::Failed(FailReason::NotLeader { hint: Some(nodes[0]) })]
        );
    }

    #[test]
    fn physical_mode_put_parks_on_its_vectors() {
        let (mut s, _) = group(2, 0);
        let mut out = Vec::new();
        s.handle_request(now(1, 1), put(HlcTimestamp::ZERO, Some((vec![0, 0], vec![0, 1]))), &mut out)
            .unwrap();
        assert!(matches!(out[0], Effect::Trace(TraceEvent::Parked { op: OpKind::Put, .. })));
        let out = replicate(&mut s, 1, 1, 1);
        let r = replies(&out);
        let ReplyBody::Put(p) = r[0] else { panic!("{r:?}") };
        // floored above the replicated version's timestamp <1,0> even though pc is 1
        assert!(p.t > HlcTimestamp::new(1, 0));

        let (mut s, _) = group(2, 0);
        let mut out = Vec::new();
        s.handle_request(now(1, 7), put(HlcTimestamp::ZERO, Some((vec![0, 0], vec![0, 0]))), &mut out)
            .unwrap();
        assert!(matches!(replies(&out)[0], ReplyBody::Put(_)));
    }

    #[test]
    fn duplicate_replicate_is_acknowledged_not_reapplied() {
        let (mut s, _) = group(2, 1);
        let out = replicate(&mut s, 0, 7, 1);
        assert!(out.iter().any(|e| matches!(e, Effect::Trace(TraceEvent::CommitApplied { .. }))));
        assert_eq!(s.store().sv(), &[7, 0]);
        let out = replicate(&mut s, 0, 7, 1);
        assert_eq!(
            out,
            vec![Effect::Xdc {
                to: NodeId(99),
                msg: XdcMessage::Ack {
                    from_dc: DcId(1),
                    applied: 1
                }
            }]
        );
    }

    #[test]
    fn out_of_order_replicates_are_held_back() {
        let (mut s, _) = group(2, 1);
        replicate(&mut s, 0, 5, 2);
        assert_eq!(s.store().sv(), &[0, 0]);
        assert_eq!(s.held_back(), 1);
        replicate(&mut s, 0, 3, 1);
        assert_eq!(s.store().sv(), &[5, 0]);
        assert_eq!(s.held_back(), 0);
    }

    #[test]
    fn without_fifo_a_late_write_is_lost_to_dedup() {
        let (mut s, _) = group(2, 1);
        s.cfg.xdc_fifo = false;
        replicate(&mut s, 0, 5, 2);
        assert_eq!(s.store().sv(), &[5, 0]);
        let out = replicate(&mut s, 0, 3, 1);
        assert!(out.iter().any(|e| matches!(e, Effect::Trace(TraceEvent::Deduplicated { .. }))));
    }

    fn commit_to_xc(xc: &mut XcServer, entries: Vec<LogEntry<ReplicationPayload>>, leaders: &[Option<NodeId>]) -> Vec<Effect> {
        let leader = NodeId(0);
        let commit = entries.last().map_or(0, |e| e.index);
        let mut out = Vec::new();
        xc.handle_raft(
            SimTime::from_ms(1),
            leader,
            RaftMessage::AppendEntries {
                term: 1,
                leader,
                prev_index: 0,
                prev_term: 0,
                entries,
                leader_commit: commit,
            },
            leaders,
            &mut out,
        );
        out
    }

    fn local_entry(index: u64, dc: u16) -> LogEntry<ReplicationPayload> {
        let mut p = remote_payload(dc, 0, 0);
        p.origin_idx = None;
        LogEntry {
            index,
            term: 1,
            payload: EntryPayload::Data(p),
        }
    }

    #[test]
    fn xc_fans_out_local_commits_only() {
        let c = ServerConfig {
            topology: Topology::new(3, 1, 1),
            ..cfg(3)
        };
        let rc = RaftConfig::with_tick(vec![NodeId(0)], vec![NodeId(1)], 1000);
        let mut xc = XcServer::new(NodeId(1), c, rc, 1, Some(NodeId(0)), SimTime::ZERO);
        let leaders = [Some(NodeId(0)), Some(NodeId(2)), Some(NodeId(4))];
        let remote = LogEntry {
            index: 2,
            term: 1,
            payload: EntryPayload::Data(remote_payload(1, 9, 1)),
        };
        let out = commit_to_xc(&mut xc, vec![local_entry(1, 0), remote], &leaders);
        let sent: Vec<(NodeId, u64, Option<u64>)> = out
            .iter()
            .filter_map(|e| match e {
                Effect::Xdc {
                    to,
                    msg: XdcMessage::Replicate(r),
                } => Some((*to, r.seq, r.payload.origin_idx)),
                _ => None,
            })
            .collect();
        assert_eq!(sent, vec![(NodeId(2), 1, Some(1)), (NodeId(4), 1, Some(1))]);
        assert!(!xc.fully_acked());
    }

    #[test]
    fn single_dc_xc_sends_nothing() {
        let c = cfg(1);
        let rc = RaftConfig::with_tick(vec![NodeId(0)], vec![NodeId(1)], 1000);
        let mut xc = XcServer::new(NodeId(1), c, rc, 1, Some(NodeId(0)), SimTime::ZERO);
        let out = commit_to_xc(&mut xc, vec![local_entry(1, 0)], &[Some(NodeId(0))]);
        assert!(out.iter().all(|e| !matches!(e, Effect::Xdc { .. })));
        assert!(xc.fully_acked());
    }

    #[test]
    fn xc_resends_after_nack_and_jumps_on_ack() {
        let c = cfg(2);
        let rc = RaftConfig::with_tick(vec![NodeId(0)], vec![NodeId(1)], 1000);
        let mut xc = XcServer::new(NodeId(1), c, rc, 1, Some(NodeId(0)), SimTime::ZERO);
        let leaders = [Some(NodeId(0)), Some(NodeId(2))];
        commit_to_xc(&mut xc, vec![local_entry(1, 0), local_entry(2, 0), local_entry(3, 0)], &leaders);
        let mut out = Vec::new();
        xc.handle_xdc(
            SimTime::from_ms(2),
            XdcMessage::Nack {
                from_dc: DcId(1),
                applied: 1,
                hint: None,
            },
            &leaders,
            &mut out,
        );
        let seqs: Vec<u64> = out
            .iter()
            .filter_map(|e| match e {
                Effect::Xdc {
                    msg: XdcMessage::Replicate(r),
                    ..
                } => Some(r.seq),
                _ => None,
            })
            .collect();
        assert_eq!(seqs, vec![2, 3]);
        let mut out = Vec::new();
        xc.handle_xdc(
            SimTime::from_ms(3),
            XdcMessage::Ack {
                from_dc: DcId(1),
                applied: 3,
            },
            &leaders,
            &mut out,
        );
        assert!(xc.fully_acked());
    }
}
