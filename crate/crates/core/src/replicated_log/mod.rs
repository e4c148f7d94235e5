//! Minimal Raft: leader election, log replication and commitment for one group.
//!
//! A [`RaftNode`] is a pure state machine. Every entry point takes the current simulated time
//! and returns the messages to send plus the entries that became committed, which are
//! reported exactly once and in index order. Learners receive the log but never vote or
//! campaign, and they do not count toward the commit majority.

pub mod fuzz;

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::SimTime;
use crate::types::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
    Learner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryPayload<T> {
    /// Appended by every new leader so entries from older terms can commit.
    Noop,
    Data(T),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry<T> {
    pub index: u64,
    pub term: u64,
    pub payload: EntryPayload<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaftMessage<T> {
    AppendEntries {
        term: u64,
        leader: NodeId,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry<T>>,
        leader_commit: u64,
    },
    /// `match_index` is the last index known to agree on success, or the follower's hint
    /// for where to retry on failure.
    AppendEntriesReply {
        term: u64,
        success: bool,
        match_index: u64,
    },
    RequestVote {
        term: u64,
        candidate: NodeId,
        last_log_index: u64,
        last_log_term: u64,
    },
    RequestVoteReply {
        term: u64,
        granted: bool,
    },
}

impl<T> RaftMessage<T> {
    /// Short tag used when raft traffic is written to traces.
    pub fn tag(&self) -> &'static str {
        match self {
            RaftMessage::AppendEntries { .. } => "AE",
            RaftMessage::AppendEntriesReply { .. } => "AER",
            RaftMessage::RequestVote { .. } => "RV",
            RaftMessage::RequestVoteReply { .. } => "RVR",
        }
    }

    pub fn term(&self) -> u64 {
        match self {
            RaftMessage::AppendEntries { term, .. }
            | RaftMessage::AppendEntriesReply { term, .. }
            | RaftMessage::RequestVote { term, .. }
            | RaftMessage::RequestVoteReply { term, .. } => *term,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RaftConfig {
    pub voters: Vec<NodeId>,
    pub learners: Vec<NodeId>,
    /// Election timeouts are drawn uniformly from this range (microseconds).
    pub election_timeout_us: (u64, u64),
    pub heartbeat_us: u64,
    pub max_batch: usize,
}

impl RaftConfig {
    /// Timeouts in `[10 T, 20 T]` and a heartbeat every `T`.
    pub fn with_tick(voters: Vec<NodeId>, learners: Vec<NodeId>, tick_us: u64) -> Self {
        RaftConfig {
            voters,
            learners,
            election_timeout_us: (10 * tick_us, 20 * tick_us),
            heartbeat_us: tick_us,
            max_batch: 64,
        }
    }

    fn majority(&self) -> usize {
        self.voters.len() / 2 + 1
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProposeError {
    #[error("not the leader (hint: {hint:?})")]
    NotLeader { hint: Option<NodeId> },
}

#[derive(Debug)]
pub struct Output<T> {
    pub messages: Vec<(NodeId, RaftMessage<T>)>,
    pub committed: Vec<LogEntry<T>>,
}

impl<T> Default for Output<T> {
    fn default() -> Self {
        Output {
            messages: Vec::new(),
            committed: Vec::new(),
        }
    }
}

impl<T> Output<T> {
    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.committed.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Peer {
    id: NodeId,
    learner: bool,
    next: u64,
    matched: u64,
    /// Highest index covered by an append already sent in this term.
    sent_upto: u64,
    /// Commit index the peer can already derive from what it was sent.
    commit_known: u64,
}

#[derive(Debug, Clone)]
pub struct RaftNode<T> {
    id: NodeId,
    cfg: RaftConfig,
    learner: bool,
    role: Role,
    term: u64,
    voted_for: Option<NodeId>,
    log: Vec<LogEntry<T>>,
    commit: u64,
    delivered: u64,
    leader_hint: Option<NodeId>,
    peers: Vec<Peer>,
    votes: Vec<NodeId>,
    election_deadline: SimTime,
    heartbeat_due: SimTime,
    rng: ChaCha8Rng,
}

impl<T: Clone + PartialEq + Debug> RaftNode<T> {
    pub fn new(id: NodeId, cfg: RaftConfig, seed: u64, now: SimTime) -> Self {
        let learner = cfg.learners.contains(&id);
        assert!(learner || cfg.voters.contains(&id), "{id} not in group");
        let peers = cfg
            .voters
            .iter()
            .map(|&p| (p, false))
            .chain(cfg.learners.iter().map(|&p| (p, true)))
            .filter(|(p, _)| *p != id)
            .map(|(id, learner)| Peer {
                id,
                learner,
                next: 1,
                matched: 0,
                sent_upto: 0,
                commit_known: 0,
            })
            .collect();
        let mut node = RaftNode {
            id,
            cfg,
            learner,
            role: if learner { Role::Learner } else { Role::Follower },
            term: 0,
            voted_for: None,
            log: Vec::new(),
            commit: 0,
            delivered: 0,
            leader_hint: None,
            peers,
            votes: Vec::new(),
            election_deadline: now,
            heartbeat_due: now,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        node.reset_election_deadline(now);
        node
    }

    /// Starts the group in term 1 with `leader` already elected, as if an election had
    /// completed before the run began.
    pub fn bootstrapped(id: NodeId, cfg: RaftConfig, seed: u64, leader: NodeId, now: SimTime) -> Self {
        let mut node = Self::new(id, cfg, seed, now);
        node.term = 1;
        node.leader_hint = Some(leader);
        if !node.learner {
            node.voted_for = Some(leader);
        }
        if id == leader {
            node.role = Role::Leader;
            node.heartbeat_due = now;
        }
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        if self.is_leader() {
            Some(self.id)
        } else {
            self.leader_hint
        }
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn delivered_index(&self) -> u64 {
        self.delivered
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log(&self) -> &[LogEntry<T>] {
        &self.log
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry<T>> {
        if index == 0 {
            return None;
        }
        self.log.get(index as usize - 1)
    }

    fn term_at(&self, index: u64) -> u64 {
        self.entry(index).map_or(0, |e| e.term)
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn reset_election_deadline(&mut self, now: SimTime) {
        let (lo, hi) = self.cfg.election_timeout_us;
        let span = self.rng.gen_range(lo..=hi.max(lo));
        self.election_deadline = now + span;
    }

    /// Crash recovery: keeps term, vote and log; everything else is rebuilt. Learners keep
    /// nothing and replay the log from the leader.
    pub fn restart(&mut self, now: SimTime) {
        if self.learner {
            self.term = 0;
            self.voted_for = None;
            self.log.clear();
            self.role = Role::Learner;
        } else {
            self.role = Role::Follower;
        }
        self.commit = 0;
        self.delivered = 0;
        self.leader_hint = None;
        self.votes.clear();
        for p in &mut self.peers {
            p.next = 1;
            p.matched = 0;
            p.sent_upto = 0;
            p.commit_known = 0;
        }
        self.reset_election_deadline(now);
    }

    pub fn propose(&mut self, payload: T, now: SimTime) -> Result<(u64, u64, Output<T>), ProposeError> {
        if self.role != Role::Leader {
            return Err(ProposeError::NotLeader {
                hint: self.leader_hint,
            });
        }
        let index = self.last_index() + 1;
        self.log.push(LogEntry {
            index,
            term: self.term,
            payload: EntryPayload::Data(payload),
        });
        let mut out = Output::default();
        for i in 0..self.peers.len() {
            let p = &self.peers[i];
            let from = if p.sent_upto + 1 >= p.next {
                p.sent_upto + 1
            } else {
                p.next
            };
            if from <= index {
                let msg = self.append_for(i, from);
                out.messages.push(msg);
            }
        }
        self.advance_commit(now, &mut out);
        Ok((index, self.term, out))
    }

    pub fn tick(&mut self, now: SimTime) -> Output<T> {
        let mut out = Output::default();
        match self.role {
            Role::Leader => {
                if now >= self.heartbeat_due {
                    self.heartbeat_due = now + self.cfg.heartbeat_us;
                    for i in 0..self.peers.len() {
                        let next = self.peers[i].next;
                        let msg = self.append_for(i, next);
                        out.messages.push(msg);
                    }
                }
            }
            Role::Follower | Role::Candidate => {
                if now >= self.election_deadline {
                    self.start_election(now, &mut out);
                }
            }
            Role::Learner => {}
        }
        out
    }

    pub fn handle_message(&mut self, from: NodeId, msg: RaftMessage<T>, now: SimTime) -> Output<T> {
        let mut out = Output::default();
        match msg {
            RaftMessage::AppendEntries {
                term,
                leader,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            } => self.on_append(
                from,
                term,
                leader,
                prev_index,
                prev_term,
                entries,
                leader_commit,
                now,
                &mut out,
            ),
            RaftMessage::AppendEntriesReply {
                term,
                success,
                match_index,
            } => self.on_append_reply(from, term, success, match_index, now, &mut out),
            RaftMessage::RequestVote {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => self.on_request_vote(from, term, candidate, last_log_index, last_log_term, now, &mut out),
            RaftMessage::RequestVoteReply { term, granted } => {
                self.on_vote_reply(from, term, granted, now, &mut out)
            }
        }
        out
    }

    fn observe_term(&mut self, term: u64, now: SimTime) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
            if !self.learner {
                if self.role != Role::Follower {
                    self.reset_election_deadline(now);
                }
                self.role = Role::Follower;
            }
            self.leader_hint = None;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append(
        &mut self,
        from: NodeId,
        term: u64,
        leader: NodeId,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry<T>>,
        leader_commit: u64,
        now: SimTime,
        out: &mut Output<T>,
    ) {
        if term < self.term {
            out.messages.push((
                from,
                RaftMessage::AppendEntriesReply {
                    term: self.term,
                    success: false,
                    match_index: self.last_index(),
                },
            ));
            return;
        }
        self.observe_term(term, now);
        if !self.learner {
            self.role = Role::Follower;
        }
        self.leader_hint = Some(leader);
        self.reset_election_deadline(now);

        if prev_index > self.last_index() {
            out.messages.push((
                from,
                RaftMessage::AppendEntriesReply {
                    term: self.term,
                    success: false,
                    match_index: self.last_index(),
                },
            ));
            return;
        }
        if prev_index > 0 && self.term_at(prev_index) != prev_term {
            out.messages.push((
                from,
                RaftMessage::AppendEntriesReply {
                    term: self.term,
                    success: false,
                    match_index: prev_index - 1,
                },
            ));
            return;
        }
        let count = entries.len() as u64;
        for e in entries {
            let existing = self.entry(e.index).map(|x| x.term);
            match existing {
                Some(t) if t == e.term => {}
                Some(_) => {
                    assert!(
                        e.index > self.commit,
                        "{}: leader asked to overwrite committed index {}",
                        self.id,
                        e.index
                    );
                    self.log.truncate(e.index as usize - 1);
                    self.log.push(e);
                }
                None => {
                    debug_assert_eq!(e.index, self.last_index() + 1);
                    self.log.push(e);
                }
            }
        }
        let last_new = prev_index + count;
        let new_commit = leader_commit.min(last_new);
        if new_commit > self.commit {
            self.commit = new_commit;
            self.deliver(out);
        }
        out.messages.push((
            from,
            RaftMessage::AppendEntriesReply {
                term: self.term,
                success: true,
                match_index: last_new,
            },
        ));
    }

    fn on_append_reply(
        &mut self,
        from: NodeId,
        term: u64,
        success: bool,
        match_index: u64,
        now: SimTime,
        out: &mut Output<T>,
    ) {
        if term > self.term {
            self.observe_term(term, now);
            return;
        }
        if self.role != Role::Leader || term < self.term {
            return;
        }
        let Some(i) = self.peers.iter().position(|p| p.id == from) else {
            return;
        };
        let last = self.last_index();
        if success {
            let p = &mut self.peers[i];
            p.matched = p.matched.max(match_index);
            p.next = p.next.max(p.matched + 1);
            p.sent_upto = p.sent_upto.max(p.matched);
            if p.sent_upto < last {
                let from_idx = p.sent_upto + 1;
                let msg = self.append_for(i, from_idx);
                out.messages.push(msg);
            }
            self.advance_commit(now, out);
            let p = &self.peers[i];
            if self.commit.min(p.matched) > p.commit_known {
                let msg = self.commit_notice(i);
                out.messages.push(msg);
            }
        } else {
            let p = &mut self.peers[i];
            if p.learner && match_index < p.matched {
                // A restarted learner lost its log.
                p.matched = match_index;
                p.commit_known = p.commit_known.min(match_index);
            }
            let retry = (p.next.saturating_sub(1)).min(match_index + 1).max(p.matched + 1).max(1);
            p.next = retry;
            p.sent_upto = retry - 1;
            let msg = self.append_for(i, retry);
            out.messages.push(msg);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_request_vote(
        &mut self,
        from: NodeId,
        term: u64,
        candidate: NodeId,
        last_log_index: u64,
        last_log_term: u64,
        now: SimTime,
        out: &mut Output<T>,
    ) {
        if self.learner {
            return;
        }
        self.observe_term(term, now);
        let up_to_date = (last_log_term, last_log_index) >= (self.last_term(), self.last_index());
        let granted = term == self.term
            && self.voted_for.is_none_or(|v| v == candidate)
            && up_to_date;
        if granted {
            self.voted_for = Some(candidate);
            self.reset_election_deadline(now);
        }
        out.messages.push((
            from,
            RaftMessage::RequestVoteReply {
                term: self.term,
                granted,
            },
        ));
    }

    fn on_vote_reply(&mut self, from: NodeId, term: u64, granted: bool, now: SimTime, out: &mut Output<T>) {
        if term > self.term {
            self.observe_term(term, now);
            return;
        }
        if self.role != Role::Candidate || term < self.term || !granted {
            return;
        }
        if !self.votes.contains(&from) {
            self.votes.push(from);
        }
        if self.votes.len() >= self.cfg.majority() {
            self.become_leader(now, out);
        }
    }

    fn start_election(&mut self, now: SimTime, out: &mut Output<T>) {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_hint = None;
        self.votes = vec![self.id];
        self.reset_election_deadline(now);
        if self.votes.len() >= self.cfg.majority() {
            self.become_leader(now, out);
            return;
        }
        let (last_log_index, last_log_term) = (self.last_index(), self.last_term());
        for p in self.peers.iter().filter(|p| !p.learner) {
            out.messages.push((
                p.id,
                RaftMessage::RequestVote {
                    term: self.term,
                    candidate: self.id,
                    last_log_index,
                    last_log_term,
                },
            ));
        }
    }

    fn become_leader(&mut self, now: SimTime, out: &mut Output<T>) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        let last = self.last_index();
        for p in &mut self.peers {
            p.next = last + 1;
            p.matched = 0;
            p.sent_upto = last;
            p.commit_known = 0;
        }
        self.log.push(LogEntry {
            index: last + 1,
            term: self.term,
            payload: EntryPayload::Noop,
        });
        for i in 0..self.peers.len() {
            let msg = self.append_for(i, last + 1);
            out.messages.push(msg);
        }
        self.heartbeat_due = now + self.cfg.heartbeat_us;
        self.advance_commit(now, out);
    }

    /// Builds an append for peer `i` starting at `from` and records how far it reaches.
    fn append_for(&mut self, i: usize, from: u64) -> (NodeId, RaftMessage<T>) {
        let last = self.last_index();
        let from = from.clamp(1, last + 1);
        let upto = last.min(from - 1 + self.cfg.max_batch as u64);
        let entries = self.log[(from - 1) as usize..upto as usize].to_vec();
        let prev_index = from - 1;
        let msg = RaftMessage::AppendEntries {
            term: self.term,
            leader: self.id,
            prev_index,
            prev_term: self.term_at(prev_index),
            entries,
            leader_commit: self.commit,
        };
        let commit = self.commit;
        let p = &mut self.peers[i];
        p.sent_upto = p.sent_upto.max(upto);
        p.commit_known = p.commit_known.max(commit.min(upto));
        (p.id, msg)
    }

    fn advance_commit(&mut self, _now: SimTime, out: &mut Output<T>) {
        let majority = self.cfg.majority();
        let mut n = self.last_index();
        while n > self.commit {
            if self.term_at(n) == self.term {
                let acks = 1 + self
                    .peers
                    .iter()
                    .filter(|p| !p.learner && p.matched >= n)
                    .count();
                if acks >= majority {
                    break;
                }
            }
            n -= 1;
        }
        if n > self.commit {
            self.commit = n;
            self.deliver(out);
            for i in 0..self.peers.len() {
                let msg = self.commit_notice(i);
                out.messages.push(msg);
            }
        }
    }

    /// An empty append anchored at what the peer acknowledged, carrying the commit index.
    fn commit_notice(&mut self, i: usize) -> (NodeId, RaftMessage<T>) {
        let prev = self.peers[i].matched.min(self.last_index());
        let msg = RaftMessage::AppendEntries {
            term: self.term,
            leader: self.id,
            prev_index: prev,
            prev_term: self.term_at(prev),
            entries: Vec::new(),
            leader_commit: self.commit,
        };
        let p = &mut self.peers[i];
        p.commit_known = p.commit_known.max(self.commit.min(prev));
        (p.id, msg)
    }

    fn deliver(&mut self, out: &mut Output<T>) {
        while self.delivered < self.commit {
            self.delivered += 1;
            out.committed.push(self.log[self.delivered as usize - 1].clone());
        }
    }
}
