//! Whole-system simulation: every data server, XC learner and client of one scenario on a
//! single event loop.
//!
//! Raft links are intra-datacenter and may drop or duplicate. Client links cost the
//! intra-datacenter delay locally and the cross-datacenter delay otherwise. Cross-datacenter
//! server links are reliable and, unless disabled, FIFO per (sender, receiver) pair.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::client_session::{pick_dc, pick_replica, ClientSession, Completion};
use crate::config::{FaultSpec, FaultTarget, ScriptOp, ScriptOpKind, SimConfig};
use crate::protocol::{ClientReply, ClientRequest, FailReason, ReplyBody, XdcMessage};
use crate::replicated_log::fuzz::log_matching_violation;
use crate::replicated_log::{EntryPayload, RaftConfig, RaftMessage, RaftNode};
use crate::server::{DataServer, Effect, Now, ServerConfig, XcServer};
use crate::simnet::{
    ms_to_us, sample_clock, sample_delay, EventQueue, FifoReceiver, FifoSender, PhysicalClock,
    SimTime, Topology,
};
use crate::trace::{OpKind, Trace, TraceEvent, TraceHeader};
use crate::types::{
    workload_key, workload_value, ClientId, DcId, Key, NodeId, PartitionId, Partitioner,
    ReadLevel, ReplicationPayload, RequestId, WriteLevel,
};

/// Every node's clock starts this far past the simulation epoch so negative offsets never
/// clamp at zero.
const CLOCK_EPOCH_MS: f64 = 10_000.0;

/// One client operation as the client saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub client: ClientId,
    pub home: DcId,
    pub target_dc: DcId,
    pub kind: OpKind,
    pub read_level: ReadLevel,
    pub write_level: WriteLevel,
    pub hlc_mode: bool,
    pub issued: SimTime,
    pub done: SimTime,
    pub ok: bool,
}

impl OpRecord {
    pub fn latency_ms(&self) -> f64 {
        (self.done - self.issued) as f64 / 1000.0
    }

    pub fn is_remote(&self) -> bool {
        self.home != self.target_dc
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub quiesced: bool,
    pub end: SimTime,
    /// When the last client went idle with its budget spent.
    pub load_stopped: Option<SimTime>,
    pub events: u64,
    pub ops_issued: u64,
    pub ops_ok: u64,
    pub ops_failed: u64,
    pub stale_replies: u64,
    pub crashes: u32,
    pub raft_messages: u64,
    pub raft_dropped: u64,
    /// Cross-datacenter deliveries that arrived out of channel order (only counted when
    /// FIFO delivery is on, where it would be a bug).
    pub fifo_violations: u64,
    pub raft_violations: Vec<String>,
    /// Fatal protocol errors and drain failures.
    pub errors: Vec<String>,
}

impl RunReport {
    pub fn is_clean(&self) -> bool {
        self.quiesced && self.raft_violations.is_empty() && self.errors.is_empty() && self.fifo_violations == 0
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub ops: Vec<OpRecord>,
    pub report: RunReport,
}

#[derive(Debug)]
enum Ev {
    Tick(NodeId),
    Raft {
        from: NodeId,
        to: NodeId,
        msg: RaftMessage<ReplicationPayload>,
    },
    Request {
        to: NodeId,
        req: ClientRequest,
    },
    Serve {
        node: NodeId,
        incarnation: u32,
        req: ClientRequest,
    },
    Reply {
        client: ClientId,
        reply: ClientReply,
    },
    Xdc {
        from: NodeId,
        to: NodeId,
        chan: Option<u64>,
        msg: XdcMessage,
    },
    ClientGo(ClientId),
    ClientTimeout(ClientId, RequestId),
    Fault(usize),
    Restart(NodeId),
    Check,
}

enum Server {
    Data(Box<DataServer>),
    Xc(Box<XcServer>),
}

impl Server {
    fn raft(&self) -> &RaftNode<ReplicationPayload> {
        match self {
            Server::Data(s) => s.raft(),
            Server::Xc(x) => x.raft(),
        }
    }
}

struct Slot {
    server: Server,
    clock: PhysicalClock,
    alive: bool,
    incarnation: u32,
    busy_until: SimTime,
    /// Highest commit index already compared against the group's committed history.
    commit_checked: u64,
}

struct InFlight {
    req: RequestId,
    kind: OpKind,
    read_level: ReadLevel,
    write_level: WriteLevel,
    hlc_mode: bool,
    target: NodeId,
    target_dc: DcId,
    issued: SimTime,
    redirected: bool,
    request: ClientRequest,
}

struct Client {
    session: ClientSession,
    rng: ChaCha8Rng,
    script: Option<Vec<ScriptOp>>,
    step: usize,
    inflight: Option<InFlight>,
    done: bool,
}

#[derive(Default)]
struct GroupHistory {
    /// term -> leader
    leaders: BTreeMap<u64, NodeId>,
    /// committed[i - 1] = (term, payload) of the entry committed at index i
    committed: Vec<(u64, EntryPayload<ReplicationPayload>)>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_CLOCKS: u64 = 1;
const STREAM_NET: u64 = 2;
const STREAM_FAULTS: u64 = 3;
const STREAM_RAFT: u64 = 4;
const STREAM_CLIENT_BASE: u64 = 1 << 20;

pub struct Cluster {
    cfg: SimConfig,
    topo: Topology,
    partitioner: Partitioner,
    queue: EventQueue<Ev>,
    slots: Vec<Slot>,
    clients: Vec<Client>,
    net_rng: ChaCha8Rng,
    senders: BTreeMap<(NodeId, NodeId), FifoSender>,
    receivers: BTreeMap<(NodeId, NodeId), FifoReceiver<XdcMessage>>,
    groups: Vec<GroupHistory>,
    faults: Vec<FaultSpec>,
    trace: Trace,
    ops: Vec<OpRecord>,
    report: RunReport,
    client_inflight: u64,
    xdc_inflight: u64,
    drain_deadline: Option<SimTime>,
    finished: bool,
    tick_us: u64,
    intra_us: (u64, u64),
    xdc_us: u64,
    xdc_jitter_us: u64,
    service_us: u64,
    effects: Vec<Effect>,
}

/// Runs one scenario to quiescence (or the drain limit) and returns its trace.
pub fn run(cfg: &SimConfig) -> RunOutput {
    Cluster::new(cfg.clone()).run()
}

impl Cluster {
    pub fn new(cfg: SimConfig) -> Self {
        let topo = cfg.topology();
        let seed = cfg.seed;
        let tick_us = ms_to_us(cfg.tick_ms).max(1);
        let server_cfg = ServerConfig {
            topology: topo,
            xdc_fifo: cfg.xdc_fifo,
            park_timeout_us: cfg.park_timeout_ms.map(ms_to_us),
            gc_window: cfg.gc_window,
            xc_retry_us: ms_to_us(cfg.xc_retry_ms).max(tick_us),
        };
        let mut clock_rng = stream_rng(seed, STREAM_CLOCKS);
        let mut raft_rng = stream_rng(seed, STREAM_RAFT);
        let mut slots = Vec::with_capacity(topo.node_count());
        for id in topo.all_nodes() {
            let info = topo.info(id);
            let group_xc = topo.xc(info.dc, info.partition);
            let voters = topo.data_nodes(info.dc, info.partition);
            let leader = voters[0];
            let raft_cfg = RaftConfig::with_tick(voters, vec![group_xc], tick_us);
            let node_seed: u64 = raft_rng.gen();
            let server = if info.is_xc {
                Server::Xc(Box::new(XcServer::new(
                    id,
                    server_cfg.clone(),
                    raft_cfg,
                    node_seed,
                    Some(leader),
                    SimTime::ZERO,
                )))
            } else {
                Server::Data(Box::new(DataServer::new(
                    id,
                    server_cfg.clone(),
                    raft_cfg,
                    node_seed,
                    Some(leader),
                    SimTime::ZERO,
                )))
            };
            let sampled = sample_clock(&mut clock_rng, cfg.skew_ms, cfg.drift);
            let dc_off = cfg.dc_offsets_ms.get(info.dc.index()).copied().unwrap_or(0.0);
            let clock = PhysicalClock::new(sampled.offset_ms() + dc_off + CLOCK_EPOCH_MS, sampled.drift);
            slots.push(Slot {
                server,
                clock,
                alive: true,
                incarnation: 0,
                busy_until: SimTime::ZERO,
                commit_checked: 0,
            });
        }

        let mut clients = Vec::new();
        if cfg.scripts.is_empty() {
            for dc in topo.dc_ids() {
                for _ in 0..cfg.clients_per_dc {
                    let id = ClientId(clients.len() as u32);
                    clients.push(Client {
                        session: ClientSession::new(id, dc, topo.dcs, topo.partitions),
                        rng: stream_rng(seed, STREAM_CLIENT_BASE + id.0 as u64),
                        script: None,
                        step: 0,
                        inflight: None,
                        done: false,
                    });
                }
            }
        } else {
            for s in &cfg.scripts {
                let id = ClientId(clients.len() as u32);
                clients.push(Client {
                    session: ClientSession::new(id, DcId(s.home), topo.dcs, topo.partitions),
                    rng: stream_rng(seed, STREAM_CLIENT_BASE + id.0 as u64),
                    script: Some(s.ops.clone()),
                    step: 0,
                    inflight: None,
                    done: false,
                });
            }
        }

        let mut faults = cfg.faults.clone();
        if cfg.crash_faults {
            faults.extend(random_faults(&cfg, topo));
        }

        let header = TraceHeader::new(cfg.hash(), seed, topo);
        Cluster {
            partitioner: Partitioner::new(topo.partitions),
            queue: EventQueue::new(),
            net_rng: stream_rng(seed, STREAM_NET),
            senders: BTreeMap::new(),
            receivers: BTreeMap::new(),
            groups: (0..topo.dcs as usize * topo.partitions as usize)
                .map(|_| GroupHistory::default())
                .collect(),
            faults,
            trace: Trace::new(header),
            ops: Vec::new(),
            report: RunReport::default(),
            client_inflight: 0,
            xdc_inflight: 0,
            drain_deadline: None,
            finished: false,
            tick_us,
            intra_us: (ms_to_us(cfg.intra_delay_ms[0]), ms_to_us(cfg.intra_delay_ms[1])),
            xdc_us: ms_to_us(cfg.xdc_delay_ms),
            xdc_jitter_us: ms_to_us(cfg.xdc_jitter_ms),
            service_us: ms_to_us(cfg.service_ms),
            effects: Vec::new(),
            topo,
            slots,
            clients,
            cfg,
        }
    }

    pub fn run(mut self) -> RunOutput {
        for id in self.topo.all_nodes() {
            // spread the ticks so groups do not all fire on the same microsecond
            let phase = (id.0 as u64 * 131) % self.tick_us;
            self.queue.schedule(SimTime(phase), Ev::Tick(id));
        }
        let warmup = ms_to_us(self.cfg.warmup_ms);
        for c in 0..self.clients.len() {
            let jitter = self.clients[c].rng.gen_range(0..=self.tick_us);
            self.queue.schedule(SimTime(warmup + jitter), Ev::ClientGo(ClientId(c as u32)));
        }
        for (i, f) in self.faults.iter().enumerate() {
            self.queue.schedule(SimTime::from_ms_f64(f.at_ms), Ev::Fault(i));
        }
        if self.clients.is_empty() {
            self.load_stopped();
        }

        while !self.finished {
            let Some((now, ev)) = self.queue.pop() else {
                self.report.errors.push("event queue ran dry".into());
                break;
            };
            if let Err(e) = self.dispatch(now, ev) {
                self.report.errors.push(format!("{now}: {e}"));
                break;
            }
        }

        self.finish();
        RunOutput {
            trace: self.trace,
            ops: self.ops,
            report: self.report,
        }
    }

    fn now_of(&self, node: NodeId) -> Now {
        let at = self.queue.now();
        Now {
            at,
            pc: self.slots[node.index()].clock.read_ms(at),
        }
    }

    fn group_of(&self, node: NodeId) -> usize {
        let info = self.topo.info(node);
        info.dc.index() * self.topo.partitions as usize + info.partition.index()
    }

    fn leader_of(&self, dc: DcId, p: PartitionId) -> Option<NodeId> {
        let xc = self.topo.xc(dc, p).0;
        let first = xc - self.topo.replicas as u32;
        (first..xc)
            .map(NodeId)
            .filter(|n| {
                let s = &self.slots[n.index()];
                s.alive && s.server.raft().is_leader()
            })
            .max_by_key(|n| self.slots[n.index()].server.raft().term())
    }

    fn leaders_for(&self, p: PartitionId) -> Vec<Option<NodeId>> {
        self.topo.dc_ids().map(|d| self.leader_of(d, p)).collect()
    }

    fn dispatch(&mut self, now: SimTime, ev: Ev) -> Result<(), String> {
        match ev {
            Ev::Tick(node) => {
                self.queue.schedule_in(self.tick_us, Ev::Tick(node));
                if self.slots[node.index()].alive {
                    self.tick_node(node)?;
                }
            }
            Ev::Raft { from, to, msg } => {
                if self.slots[to.index()].alive {
                    self.deliver_raft(from, to, msg)?;
                }
            }
            Ev::Request { to, req } => {
                let slot = &mut self.slots[to.index()];
                if slot.alive {
                    let start = slot.busy_until.max(now);
                    slot.busy_until = start + self.service_us;
                    let incarnation = slot.incarnation;
                    let at = slot.busy_until;
                    self.queue.schedule(
                        at,
                        Ev::Serve {
                            node: to,
                            incarnation,
                            req,
                        },
                    );
                } else {
                    self.client_inflight -= 1;
                }
            }
            Ev::Serve {
                node,
                incarnation,
                req,
            } => {
                self.client_inflight -= 1;
                let slot = &self.slots[node.index()];
                if slot.alive && slot.incarnation == incarnation {
                    let n = self.now_of(node);
                    let mut out = std::mem::take(&mut self.effects);
                    let Server::Data(s) = &mut self.slots[node.index()].server else {
                        return Err(format!("client request sent to XC {node}"));
                    };
                    let r = s.handle_request(n, req, &mut out);
                    self.apply_effects(node, &mut out);
                    self.effects = out;
                    r.map_err(|e| format!("{node}: {e}"))?;
                    self.after_step(node);
                }
            }
            Ev::Reply { client, reply } => {
                self.client_inflight -= 1;
                self.on_reply(client, reply);
            }
            Ev::Xdc { from, to, chan, msg } => {
                self.xdc_inflight -= 1;
                let batch = match chan {
                    Some(seq) => {
                        let rx = self.receivers.entry((from, to)).or_default();
                        let before = rx.delivered();
                        let out = rx.receive(seq, msg);
                        if !out.is_empty() && rx.delivered() != before + out.len() as u64 {
                            self.report.fifo_violations += 1;
                        }
                        out
                    }
                    None => vec![msg],
                };
                if self.slots[to.index()].alive {
                    for m in batch {
                        self.deliver_xdc(from, to, m)?;
                    }
                }
            }
            Ev::ClientGo(c) => self.client_next(c),
            Ev::ClientTimeout(c, req) => self.client_timeout(c, req),
            Ev::Fault(i) => self.fire_fault(i),
            Ev::Restart(node) => self.restart(node),
            Ev::Check => self.check_quiescence(),
        }
        Ok(())
    }

    fn tick_node(&mut self, node: NodeId) -> Result<(), String> {
        let n = self.now_of(node);
        let leaders = match &self.slots[node.index()].server {
            Server::Xc(_) => Some(self.leaders_for(self.topo.info(node).partition)),
            Server::Data(_) => None,
        };
        let mut out = std::mem::take(&mut self.effects);
        let r = match &mut self.slots[node.index()].server {
            Server::Data(s) => s.tick(n, &mut out).map_err(|e| format!("{node}: {e}")),
            Server::Xc(x) => {
                x.tick(n.at, leaders.as_deref().unwrap_or(&[]), &mut out);
                Ok(())
            }
        };
        self.apply_effects(node, &mut out);
        self.effects = out;
        r?;
        self.after_step(node);
        Ok(())
    }

    fn deliver_raft(
        &mut self,
        from: NodeId,
        to: NodeId,
        msg: RaftMessage<ReplicationPayload>,
    ) -> Result<(), String> {
        let n = self.now_of(to);
        let leaders = match &self.slots[to.index()].server {
            Server::Xc(_) => Some(self.leaders_for(self.topo.info(to).partition)),
            Server::Data(_) => None,
        };
        let mut out = std::mem::take(&mut self.effects);
        let r = match &mut self.slots[to.index()].server {
            Server::Data(s) => s.handle_raft(n, from, msg, &mut out).map_err(|e| format!("{to}: {e}")),
            Server::Xc(x) => {
                x.handle_raft(n.at, from, msg, leaders.as_deref().unwrap_or(&[]), &mut out);
                Ok(())
            }
        };
        self.apply_effects(to, &mut out);
        self.effects = out;
        r?;
        self.after_step(to);
        Ok(())
    }

    fn deliver_xdc(&mut self, from: NodeId, to: NodeId, msg: XdcMessage) -> Result<(), String> {
        let n = self.now_of(to);
        let leaders = match &self.slots[to.index()].server {
            Server::Xc(_) => Some(self.leaders_for(self.topo.info(to).partition)),
            Server::Data(_) => None,
        };
        let mut out = std::mem::take(&mut self.effects);
        let r = match &mut self.slots[to.index()].server {
            Server::Data(s) => s.handle_xdc(n, from, msg, &mut out).map_err(|e| format!("{to}: {e}")),
            Server::Xc(x) => {
                x.handle_xdc(n.at, msg, leaders.as_deref().unwrap_or(&[]), &mut out);
                Ok(())
            }
        };
        self.apply_effects(to, &mut out);
        self.effects = out;
        r?;
        self.after_step(to);
        Ok(())
    }

    fn apply_effects(&mut self, from: NodeId, out: &mut Vec<Effect>) {
        let now = self.queue.now();
        for e in out.drain(..) {
            match e {
                Effect::Trace(ev) => self.trace.push(now, ev),
                Effect::Raft { to, msg } => self.send_raft(from, to, msg),
                Effect::Reply { client, reply } => {
                    let delay = self.link_delay(self.topo.info(from).dc, self.clients[client.index()].session.home);
                    self.client_inflight += 1;
                    self.queue.schedule_in(delay, Ev::Reply { client, reply });
                }
                Effect::Xdc { to, msg } => self.send_xdc(from, to, msg),
            }
        }
    }

    fn send_raft(&mut self, from: NodeId, to: NodeId, msg: RaftMessage<ReplicationPayload>) {
        self.report.raft_messages += 1;
        if self.cfg.trace_raft {
            self.trace.push(
                self.queue.now(),
                TraceEvent::RaftMsg {
                    from,
                    to,
                    tag: msg.tag().to_string(),
                    term: msg.term(),
                },
            );
        }
        if self.cfg.drop_prob > 0.0 && self.net_rng.gen_bool(self.cfg.drop_prob) {
            self.report.raft_dropped += 1;
            return;
        }
        let (lo, hi) = self.intra_us;
        if self.cfg.dup_prob > 0.0 && self.net_rng.gen_bool(self.cfg.dup_prob) {
            let d = sample_delay(&mut self.net_rng, lo, hi);
            self.queue.schedule_in(
                d,
                Ev::Raft {
                    from,
                    to,
                    msg: msg.clone(),
                },
            );
        }
        let d = sample_delay(&mut self.net_rng, lo, hi);
        self.queue.schedule_in(d, Ev::Raft { from, to, msg });
    }

    fn send_xdc(&mut self, from: NodeId, to: NodeId, msg: XdcMessage) {
        let chan = if self.cfg.xdc_fifo {
            Some(self.senders.entry((from, to)).or_default().stamp())
        } else {
            None
        };
        let delay = self.xdc_us + sample_delay(&mut self.net_rng, 0, self.xdc_jitter_us);
        self.xdc_inflight += 1;
        self.queue.schedule_in(delay, Ev::Xdc { from, to, chan, msg });
    }

    fn link_delay(&mut self, a: DcId, b: DcId) -> u64 {
        if a == b {
            sample_delay(&mut self.net_rng, self.intra_us.0, self.intra_us.1)
        } else {
            self.xdc_us + sample_delay(&mut self.net_rng, 0, self.xdc_jitter_us)
        }
    }

    /// Election and commit safety, checked incrementally after every step of `node`.
    fn after_step(&mut self, node: NodeId) {
        let g = self.group_of(node);
        let slot = &self.slots[node.index()];
        let raft = slot.server.raft();
        if raft.is_leader() {
            let prev = *self.groups[g].leaders.entry(raft.term()).or_insert(node);
            if prev != node {
                self.report.raft_violations.push(format!(
                    "election safety: {prev} and {node} both lead term {}",
                    raft.term()
                ));
            }
        }
        let commit = raft.commit_index();
        if commit <= slot.commit_checked {
            return;
        }
        let history = &mut self.groups[g].committed;
        for i in slot.commit_checked + 1..=commit {
            let Some(e) = raft.entry(i) else {
                self.report
                    .raft_violations
                    .push(format!("{node} reports commit {commit} past its log"));
                break;
            };
            match history.get(i as usize - 1) {
                Some((term, payload)) => {
                    if *term != e.term || *payload != e.payload {
                        self.report.raft_violations.push(format!(
                            "commit safety: {node} committed term {} at {i}, group committed term {term}",
                            e.term
                        ));
                    }
                }
                None => {
                    debug_assert_eq!(history.len() as u64, i - 1);
                    history.push((e.term, e.payload.clone()));
                }
            }
        }
        self.slots[node.index()].commit_checked = commit;
    }

    // ---- clients ----

    fn budget_left(&self) -> bool {
        let now = self.queue.now();
        let by_ops = self.cfg.ops == 0 || self.report.ops_issued < self.cfg.ops;
        let by_time = self.cfg.duration_ms <= 0.0 || now < SimTime::from_ms_f64(self.cfg.duration_ms);
        by_ops && by_time
    }

    fn client_next(&mut self, c: ClientId) {
        let ci = c.index();
        if self.clients[ci].done || self.clients[ci].inflight.is_some() {
            return;
        }
        let scripted = self.clients[ci].script.is_some();
        let op = if scripted {
            let cl = &self.clients[ci];
            let script = cl.script.as_ref().expect("scripted");
            script.get(cl.step).cloned()
        } else if self.budget_left() {
            Some(self.random_op(ci))
        } else {
            None
        };
        let Some(op) = op else {
            self.clients[ci].done = true;
            if self.clients.iter().all(|c| c.done && c.inflight.is_none()) {
                self.load_stopped();
            }
            return;
        };
        self.issue(c, op);
    }

    fn random_op(&mut self, ci: usize) -> ScriptOp {
        let cfg = &self.cfg;
        let cl = &mut self.clients[ci];
        let is_write = cl.rng.gen_bool(cfg.write_prob);
        let key = workload_key(cl.rng.gen_range(0..cfg.key_space));
        let dc = pick_dc(&mut cl.rng, cl.session.home, self.topo.dcs, cfg.local_prob);
        let replica = if is_write {
            None
        } else {
            Some(pick_replica(&mut cl.rng, self.topo.replicas))
        };
        ScriptOp {
            op: if is_write { ScriptOpKind::Put } else { ScriptOpKind::Get },
            key: String::from_utf8_lossy(key.as_bytes()).into_owned(),
            dc: dc.0,
            replica,
            read_level: None,
            write_level: None,
            hlc_mode: None,
            pause_ms: 0.0,
        }
    }

    fn issue(&mut self, c: ClientId, op: ScriptOp) {
        let ci = c.index();
        let now = self.queue.now();
        if op.pause_ms > 0.0 && self.clients[ci].script.is_some() {
            // consume the pause once, then come back for the same step
            let cl = &mut self.clients[ci];
            if let Some(s) = cl.script.as_mut().and_then(|s| s.get_mut(cl.step)) {
                s.pause_ms = 0.0;
            }
            self.queue.schedule(now + ms_to_us(op.pause_ms), Ev::ClientGo(c));
            return;
        }
        let key = Key::from(op.key.as_str());
        let p = self.partitioner.partition_of(&key);
        let dc = DcId(op.dc);
        let read_level = op.read_level.unwrap_or(self.cfg.read_level);
        let write_level = op.write_level.unwrap_or(self.cfg.write_level);
        let hlc_mode = op.hlc_mode.unwrap_or(self.cfg.hlc_mode);
        self.report.ops_issued += 1;
        let (kind, target, request) = match op.op {
            ScriptOpKind::Get => {
                let slot = match op.replica {
                    Some(r) => r.min(self.topo.replicas - 1),
                    None => pick_replica(&mut self.clients[ci].rng, self.topo.replicas),
                };
                let target = self.topo.data_nodes(dc, p)[slot as usize];
                let g = self.clients[ci].session.begin_get(key.clone(), p, read_level);
                self.trace.push(
                    now,
                    TraceEvent::GetIssued {
                        client: c,
                        req: g.req,
                        key,
                        partition: p,
                        level: read_level,
                        target,
                        hrv: g.hrv.clone(),
                        hwv: g.hwv.clone(),
                    },
                );
                (OpKind::Get, target, ClientRequest::Get(g))
            }
            ScriptOpKind::Put => {
                let target = match self.leader_of(dc, p) {
                    Some(l) => l,
                    None => {
                        let nodes = self.topo.data_nodes(dc, p);
                        nodes[self.clients[ci].rng.gen_range(0..nodes.len())]
                    }
                };
                let cl = &mut self.clients[ci];
                let value = workload_value(c, RequestId(0));
                let mut put = cl.session.begin_put(key.clone(), value, p, write_level, hlc_mode);
                put.value = workload_value(c, put.req);
                if !hlc_mode && !self.cfg.write_blocking {
                    let z = vec![0; self.topo.dcs as usize];
                    put.blocking = Some((z.clone(), z));
                }
                self.trace.push(
                    now,
                    TraceEvent::PutIssued {
                        client: c,
                        req: put.req,
                        key,
                        partition: p,
                        level: write_level,
                        hlc_mode,
                        target,
                        dt: put.dt,
                    },
                );
                (OpKind::Put, target, ClientRequest::Put(put))
            }
        };
        let req = request.req();
        self.clients[ci].inflight = Some(InFlight {
            req,
            kind,
            read_level,
            write_level,
            hlc_mode,
            target,
            target_dc: dc,
            issued: now,
            redirected: false,
            request: request.clone(),
        });
        self.send_request(c, target, request);
        let timeout = ms_to_us(self.cfg.client_timeout_ms);
        if timeout > 0 {
            self.queue.schedule_in(timeout, Ev::ClientTimeout(c, req));
        }
    }

    fn send_request(&mut self, c: ClientId, to: NodeId, req: ClientRequest) {
        let home = self.clients[c.index()].session.home;
        let delay = self.link_delay(home, self.topo.info(to).dc);
        self.client_inflight += 1;
        self.queue.schedule_in(delay, Ev::Request { to, req });
    }

    fn on_reply(&mut self, c: ClientId, reply: ClientReply) {
        let ci = c.index();
        let current = self.clients[ci].inflight.as_ref().map(|f| f.req);
        if current != Some(reply.req) {
            self.report.stale_replies += 1;
            return;
        }
        if let ReplyBody::Failed(FailReason::NotLeader { hint }) = &reply.body {
            let f = self.clients[ci].inflight.as_ref().expect("checked above");
            if !f.redirected {
                let target = f.target;
                let info = self.topo.info(target);
                let next = hint
                    .filter(|h| {
                        let i = self.topo.info(*h);
                        !i.is_xc && i.dc == info.dc && i.partition == info.partition
                    })
                    .or_else(|| self.leader_of(info.dc, info.partition))
                    .filter(|n| *n != target);
                let f = self.clients[ci].inflight.as_mut().expect("checked above");
                f.redirected = true;
                if let Some(to) = next {
                    f.target = to;
                    let req = f.request.clone();
                    self.send_request(c, to, req);
                    return;
                }
            }
        }
        let f = self.clients[ci].inflight.take().expect("checked above");
        let done = match self.clients[ci].session.complete(reply) {
            Ok(d) => d,
            Err(e) => {
                self.report.errors.push(format!("{c}: {e}"));
                Completion::Failed(FailReason::ClientTimeout)
            }
        };
        let now = self.queue.now();
        let ok = match done {
            Completion::Read(r) => {
                self.trace.push(
                    now,
                    TraceEvent::GetReplied {
                        client: c,
                        req: f.req,
                        write: r.write,
                        dc_id: r.dc_id,
                        log_idx: r.log_idx,
                        t: r.t,
                    },
                );
                true
            }
            Completion::Wrote(w) => {
                self.trace.push(
                    now,
                    TraceEvent::PutReplied {
                        client: c,
                        req: f.req,
                        write: w.write,
                        log_idx: w.log_idx,
                        t: w.t,
                    },
                );
                true
            }
            Completion::Failed(reason) => {
                self.trace.push(
                    now,
                    TraceEvent::OpFailed {
                        client: c,
                        req: f.req,
                        op: f.kind,
                        reason,
                    },
                );
                false
            }
        };
        self.complete(c, f, ok);
    }

    fn client_timeout(&mut self, c: ClientId, req: RequestId) {
        let ci = c.index();
        if self.clients[ci].inflight.as_ref().map(|f| f.req) != Some(req) {
            return;
        }
        let f = self.clients[ci].inflight.take().expect("checked above");
        self.clients[ci].session.abandon(req);
        self.trace.push(
            self.queue.now(),
            TraceEvent::OpFailed {
                client: c,
                req,
                op: f.kind,
                reason: FailReason::ClientTimeout,
            },
        );
        self.complete(c, f, false);
    }

    fn complete(&mut self, c: ClientId, f: InFlight, ok: bool) {
        let ci = c.index();
        let now = self.queue.now();
        if ok {
            self.report.ops_ok += 1;
        } else {
            self.report.ops_failed += 1;
        }
        self.ops.push(OpRecord {
            client: c,
            home: self.clients[ci].session.home,
            target_dc: f.target_dc,
            kind: f.kind,
            read_level: f.read_level,
            write_level: f.write_level,
            hlc_mode: f.hlc_mode,
            issued: f.issued,
            done: now,
            ok,
        });
        if self.clients[ci].script.is_some() {
            self.clients[ci].step += 1;
        }
        self.client_next(c);
    }

    // ---- faults ----

    fn fire_fault(&mut self, i: usize) {
        let f = self.faults[i].clone();
        let node = match f.target {
            FaultTarget::Leader { dc, partition } => self.leader_of(DcId(dc), PartitionId(partition)),
            FaultTarget::Xc { dc, partition } => Some(self.topo.xc(DcId(dc), PartitionId(partition))),
            FaultTarget::Node { id } => Some(NodeId(id)).filter(|n| n.index() < self.slots.len()),
        };
        let Some(node) = node else { return };
        let slot = &mut self.slots[node.index()];
        if !slot.alive {
            return;
        }
        slot.alive = false;
        slot.incarnation += 1;
        self.report.crashes += 1;
        self.trace.push(self.queue.now(), TraceEvent::Crash { node });
        self.queue.schedule_in(ms_to_us(f.down_ms), Ev::Restart(node));
    }

    fn restart(&mut self, node: NodeId) {
        let now = self.queue.now();
        let slot = &mut self.slots[node.index()];
        if slot.alive {
            return;
        }
        match &mut slot.server {
            Server::Data(s) => s.restart(now),
            Server::Xc(x) => x.restart(now),
        }
        slot.alive = true;
        slot.busy_until = now;
        slot.commit_checked = 0;
        self.trace.push(now, TraceEvent::Restart { node });
    }

    // ---- termination ----

    fn load_stopped(&mut self) {
        if self.drain_deadline.is_some() {
            return;
        }
        let now = self.queue.now();
        self.report.load_stopped = Some(now);
        self.drain_deadline = Some(now + ms_to_us(self.cfg.drain_limit_ms));
        self.queue.schedule(now, Ev::Check);
    }

    fn is_quiescent(&self) -> bool {
        if self.client_inflight > 0 || self.xdc_inflight > 0 {
            return false;
        }
        if self.slots.iter().any(|s| !s.alive) {
            return false;
        }
        if self.clients.iter().any(|c| c.inflight.is_some()) {
            return false;
        }
        if self.queue.now() < self.pending_fault_horizon() {
            return false;
        }
        for dc in self.topo.dc_ids() {
            for p in self.topo.partition_ids() {
                let Some(leader) = self.leader_of(dc, p) else {
                    return false;
                };
                let lr = self.slots[leader.index()].server.raft();
                let last = lr.last_index();
                if lr.commit_index() != last {
                    return false;
                }
                for n in self.topo.data_nodes(dc, p) {
                    let Server::Data(s) = &self.slots[n.index()].server else {
                        unreachable!()
                    };
                    let r = s.raft();
                    if r.last_index() != last
                        || r.delivered_index() != last
                        || s.parked_len() > 0
                        || s.pending_puts() > 0
                        || s.held_back() > 0
                    {
                        return false;
                    }
                }
                let Server::Xc(x) = &self.slots[self.topo.xc(dc, p).index()].server else {
                    unreachable!()
                };
                if x.raft().delivered_index() != last || !x.fully_acked() {
                    return false;
                }
            }
        }
        true
    }

    fn pending_fault_horizon(&self) -> SimTime {
        self.faults
            .iter()
            .map(|f| SimTime::from_ms_f64(f.at_ms + f.down_ms))
            .max()
            .unwrap_or(SimTime::ZERO)
    }

    fn check_quiescence(&mut self) {
        if self.is_quiescent() {
            self.report.quiesced = true;
            self.finished = true;
            return;
        }
        let now = self.queue.now();
        if self.drain_deadline.is_some_and(|d| now >= d) {
            self.report
                .errors
                .push(format!("not quiescent {} ms after load stopped", self.cfg.drain_limit_ms));
            self.finished = true;
            return;
        }
        self.queue.schedule_in(self.tick_us, Ev::Check);
    }

    fn finish(&mut self) {
        let now = self.queue.now();
        self.report.end = now;
        self.report.events = self.queue.executed();
        for g in 0..self.groups.len() {
            let first = NodeId((g as u32) * (self.topo.replicas as u32 + 1));
            let members: Vec<NodeId> = (0..=self.topo.replicas as u32).map(|i| NodeId(first.0 + i)).collect();
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    let ra = self.slots[a.index()].server.raft();
                    let rb = self.slots[b.index()].server.raft();
                    if let Some(v) = log_matching_violation(ra, rb) {
                        self.report.raft_violations.push(v);
                    }
                }
            }
        }
        for slot in &self.slots {
            if let Server::Data(s) = &slot.server {
                self.trace.push(now, s.final_state());
            }
        }
    }
}

fn random_faults(cfg: &SimConfig, topo: Topology) -> Vec<FaultSpec> {
    let mut rng = stream_rng(cfg.seed, STREAM_FAULTS);
    let n = rng.gen_range(1..=2);
    (0..n)
        .map(|_| {
            let dc = rng.gen_range(0..topo.dcs);
            let partition = rng.gen_range(0..topo.partitions);
            let target = match rng.gen_range(0..4) {
                0 | 1 => FaultTarget::Leader { dc, partition },
                2 => FaultTarget::Xc { dc, partition },
                _ => {
                    let slot = rng.gen_range(0..topo.replicas) as usize;
                    FaultTarget::Node {
                        id: topo.data_nodes(DcId(dc), PartitionId(partition))[slot].0,
                    }
                }
            };
            FaultSpec {
                at_ms: cfg.warmup_ms + rng.gen_range(10.0..cfg.fault_window_ms.max(20.0)),
                down_ms: rng.gen_range(10.0..60.0),
                target,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClientScript;

    fn small() -> SimConfig {
        SimConfig {
            clients_per_dc: 4,
            partitions: 2,
            ops: 200,
            key_space: 20,
            ..SimConfig::default()
        }
    }

    #[test]
    fn default_shape_runs_to_quiescence() {
        let out = run(&small());
        assert!(out.report.is_clean(), "{:?}", out.report);
        assert_eq!(out.report.ops_issued, 200);
        assert_eq!(out.ops.len(), 200);
        assert_eq!(out.report.ops_ok, 200);
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run(&small());
        let b = run(&small());
        assert_eq!(a.trace.hash(), b.trace.hash());
        let mut c = small();
        c.seed = 2;
        assert_ne!(run(&c).trace.hash(), a.trace.hash());
    }

    #[test]
    fn replicas_converge() {
        let mut cfg = small();
        cfg.local_prob = 0.5;
        cfg.skew_ms = 50.0;
        let out = run(&cfg);
        assert!(out.report.is_clean(), "{:?}", out.report);
        let mut by_partition: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in out.trace.events() {
            if let TraceEvent::FinalState { partition, winners, sv, .. } = e {
                by_partition.entry(*partition).or_default().push((sv.clone(), winners.clone()));
            }
        }
        assert_eq!(by_partition.len(), 2);
        for states in by_partition.values() {
            assert_eq!(states.len(), 6);
            assert!(states.windows(2).all(|w| w[0].1 == w[1].1));
        }
    }

    #[test]
    fn leader_crash_recovers() {
        let mut cfg = small();
        cfg.faults = vec![
            FaultSpec {
                at_ms: 20.0,
                down_ms: 30.0,
                target: FaultTarget::Leader { dc: 0, partition: 0 },
            },
            FaultSpec {
                at_ms: 25.0,
                down_ms: 30.0,
                target: FaultTarget::Xc { dc: 1, partition: 1 },
            },
        ];
        let out = run(&cfg);
        assert!(out.report.is_clean(), "{:?}", out.report);
        assert_eq!(out.report.crashes, 2);
    }

    #[test]
    fn scripted_client_follows_its_script() {
        let op = |op, dc| ScriptOp {
            op,
            key: "a".into(),
            dc,
            replica: Some(1),
            read_level: None,
            write_level: None,
            hlc_mode: None,
            pause_ms: 0.0,
        };
        let cfg = SimConfig {
            scripts: vec![ClientScript {
                home: 0,
                ops: vec![op(ScriptOpKind::Put, 0), op(ScriptOpKind::Get, 0)],
            }],
            ..SimConfig::default()
        };
        let out = run(&cfg);
        assert!(out.report.is_clean(), "{:?}", out.report);
        let core: Vec<_> = out.trace.events().filter(|e| e.is_core()).collect();
        assert_eq!(core.len(), 6, "{core:#?}");
    }
}
