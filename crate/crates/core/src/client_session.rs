//! Client-side session state and request construction.
//!
//! `hrm[d][p]` / `hwm[d][p]` hold the highest origin-datacenter `d` log index the client has
//! read / written in partition `p`; `dt_r` / `dt_w` the highest timestamps read / written.
//! Requests carry only the column for their key's partition.

use bytes::Bytes;
use rand::Rng;
use thiserror::Error;

use crate::hlc::HlcTimestamp;
use crate::protocol::{ClientReply, GetReply, GetRequest, PutReply, PutRequest, ReplyBody};
use crate::types::{ClientId, DcId, Key, PartitionId, ReadLevel, RequestId, WriteLevel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub hrm: Vec<Vec<u64>>,
    pub hwm: Vec<Vec<u64>>,
    pub dt_r: HlcTimestamp,
    pub dt_w: HlcTimestamp,
}

impl SessionState {
    pub fn new(dcs: u16, partitions: u16) -> Self {
        let m = vec![vec![0; partitions as usize]; dcs as usize];
        SessionState {
            hrm: m.clone(),
            hwm: m,
            dt_r: HlcTimestamp::ZERO,
            dt_w: HlcTimestamp::ZERO,
        }
    }

    fn dcs(&self) -> usize {
        self.hrm.len()
    }

    fn column(m: &[Vec<u64>], p: PartitionId) -> Vec<u64> {
        m.iter().map(|row| row[p.index()]).collect()
    }

    fn zeros(&self) -> Vec<u64> {
        vec![0; self.dcs()]
    }

    /// `(hrv, hwv)` for a read at `level`.
    pub fn read_vectors(&self, p: PartitionId, level: ReadLevel) -> (Vec<u64>, Vec<u64>) {
        let hrv = if level.wants_monotonic_read() {
            Self::column(&self.hrm, p)
        } else {
            self.zeros()
        };
        let hwv = if level.wants_read_your_write() {
            Self::column(&self.hwm, p)
        } else {
            self.zeros()
        };
        (hrv, hwv)
    }

    pub fn build_get(
        &self,
        client: ClientId,
        req: RequestId,
        key: Key,
        p: PartitionId,
        level: ReadLevel,
    ) -> GetRequest {
        let (hrv, hwv) = self.read_vectors(p, level);
        GetRequest {
            client,
            req,
            key,
            hrv,
            hwv,
        }
    }

    pub fn absorb_get_reply(&mut self, p: PartitionId, reply: &GetReply) {
        let cell = &mut self.hrm[reply.dc_id.index()][p.index()];
        *cell = (*cell).max(reply.log_idx);
        self.dt_r = self.dt_r.max(reply.t);
    }

    /// Dependency time for a timestamped write.
    pub fn dependency_time(&self, level: WriteLevel) -> HlcTimestamp {
        match (level.wants_monotonic_write(), level.wants_write_follows_reads()) {
            (false, false) => HlcTimestamp::ZERO,
            (true, false) => self.dt_w,
            (false, true) => self.dt_r,
            (true, true) => self.dt_r.max(self.dt_w),
        }
    }

    /// `(hrv, hwv)` a write waits on when it is stamped from the physical clock.
    pub fn write_blocking_vectors(&self, p: PartitionId, level: WriteLevel) -> (Vec<u64>, Vec<u64>) {
        let hrv = if level.wants_write_follows_reads() {
            Self::column(&self.hrm, p)
        } else {
            self.zeros()
        };
        let hwv = if level.wants_monotonic_write() {
            Self::column(&self.hwm, p)
        } else {
            self.zeros()
        };
        (hrv, hwv)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build_put(
        &self,
        client: ClientId,
        req: RequestId,
        key: Key,
        value: Bytes,
        p: PartitionId,
        level: WriteLevel,
        hlc_mode: bool,
    ) -> PutRequest {
        let (dt, blocking) = if hlc_mode {
            (self.dependency_time(level), None)
        } else {
            (HlcTimestamp::ZERO, Some(self.write_blocking_vectors(p, level)))
        };
        PutRequest {
            client,
            req,
            key,
            value,
            dt,
            blocking,
        }
    }

    pub fn absorb_put_reply(&mut self, p: PartitionId, reply: &PutReply) {
        let cell = &mut self.hwm[reply.dc_id.index()][p.index()];
        *cell = (*cell).max(reply.log_idx);
        self.dt_w = self.dt_w.max(reply.t);
    }

    /// Every cell and scalar of `self` is at least the corresponding one of `earlier`.
    pub fn dominates(&self, earlier: &SessionState) -> bool {
        let ge = |a: &[Vec<u64>], b: &[Vec<u64>]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| x.iter().zip(y).all(|(u, v)| u >= v))
        };
        ge(&self.hrm, &earlier.hrm)
            && ge(&self.hwm, &earlier.hwm)
            && self.dt_r >= earlier.dt_r
            && self.dt_w >= earlier.dt_w
    }
}

/// Chooses the datacenter for one operation: the home datacenter with probability
/// `local_prob`, otherwise one of the others uniformly.
pub fn pick_dc<R: Rng>(rng: &mut R, home: DcId, dcs: u16, local_prob: f64) -> DcId {
    if dcs <= 1 || rng.gen_bool(local_prob.clamp(0.0, 1.0)) {
        return home;
    }
    let other = rng.gen_range(0..dcs - 1);
    DcId(if other >= home.0 { other + 1 } else { other })
}

/// Replica slot for a read: uniform over the datacenter's data replicas.
pub fn pick_replica<R: Rng>(rng: &mut R, replicas: u16) -> u16 {
    rng.gen_range(0..replicas)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("reply for {got} while {expected:?} is outstanding")]
    Mismatched {
        got: RequestId,
        expected: Option<RequestId>,
    },
    #[error("{req} got a reply of the wrong kind")]
    WrongKind { req: RequestId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outstanding {
    Get { req: RequestId, p: PartitionId },
    Put { req: RequestId, p: PartitionId },
}

impl Outstanding {
    pub fn req(&self) -> RequestId {
        match self {
            Outstanding::Get { req, .. } | Outstanding::Put { req, .. } => *req,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    Read(GetReply),
    Wrote(PutReply),
    Failed(crate::protocol::FailReason),
}

/// One closed-loop client: at most one request outstanding.
#[derive(Debug, Clone)]
pub struct ClientSession {
    pub id: ClientId,
    pub home: DcId,
    pub state: SessionState,
    next_req: u64,
    outstanding: Option<Outstanding>,
}

impl ClientSession {
    pub fn new(id: ClientId, home: DcId, dcs: u16, partitions: u16) -> Self {
        ClientSession {
            id,
            home,
            state: SessionState::new(dcs, partitions),
            next_req: 0,
            outstanding: None,
        }
    }

    pub fn outstanding(&self) -> Option<Outstanding> {
        self.outstanding
    }

    pub fn is_idle(&self) -> bool {
        self.outstanding.is_none()
    }

    fn next_id(&mut self) -> RequestId {
        assert!(self.outstanding.is_none(), "{} already has a request outstanding", self.id);
        self.next_req += 1;
        RequestId(self.next_req)
    }

    pub fn begin_get(&mut self, key: Key, p: PartitionId, level: ReadLevel) -> GetRequest {
        let req = self.next_id();
        self.outstanding = Some(Outstanding::Get { req, p });
        self.state.build_get(self.id, req, key, p, level)
    }

    pub fn begin_put(
        &mut self,
        key: Key,
        value: Bytes,
        p: PartitionId,
        level: WriteLevel,
        hlc_mode: bool,
    ) -> PutRequest {
        let req = self.next_id();
        self.outstanding = Some(Outstanding::Put { req, p });
        self.state.build_put(self.id, req, key, value, p, level, hlc_mode)
    }

    /// Abandons the outstanding request (client-side timeout).
    pub fn abandon(&mut self, req: RequestId) -> bool {
        if self.outstanding.map(|o| o.req()) == Some(req) {
            self.outstanding = None;
            true
        } else {
            false
        }
    }

    /// True if `req` was issued by this session but is no longer outstanding.
    pub fn is_stale(&self, req: RequestId) -> bool {
        req.0 <= self.next_req && self.outstanding.map(|o| o.req()) != Some(req)
    }

    pub fn complete(&mut self, reply: ClientReply) -> Result<Completion, ProtocolError> {
        let Some(out) = self.outstanding.filter(|o| o.req() == reply.req) else {
            return Err(ProtocolError::Mismatched {
                got: reply.req,
                expected: self.outstanding.map(|o| o.req()),
            });
        };
        let done = match (out, reply.body) {
            (Outstanding::Get { p, .. }, ReplyBody::Get(r)) => {
                self.state.absorb_get_reply(p, &r);
                Completion::Read(r)
            }
            (Outstanding::Put { p, .. }, ReplyBody::Put(r)) => {
                self.state.absorb_put_reply(p, &r);
                Completion::Wrote(r)
            }
            (_, ReplyBody::Failed(reason)) => Completion::Failed(reason),
            _ => return Err(ProtocolError::WrongKind { req: reply.req }),
        };
        self.outstanding = None;
        Ok(done)
    }
}
