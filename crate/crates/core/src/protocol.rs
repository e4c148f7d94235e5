//! Messages exchanged between clients, data servers and XC learners.

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::hlc::HlcTimestamp;
use crate::replicated_log::RaftMessage;
use crate::types::{ClientId, DcId, Key, NodeId, ReplicationPayload, RequestId, WriteId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetRequest {
    pub client: ClientId,
    pub req: RequestId,
    pub key: Key,
    pub hrv: Vec<u64>,
    pub hwv: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutRequest {
    pub client: ClientId,
    pub req: RequestId,
    pub key: Key,
    pub value: Bytes,
    pub dt: HlcTimestamp,
    /// `(hrv, hwv)`; present only for writes stamped without the HLC.
    pub blocking: Option<(Vec<u64>, Vec<u64>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientRequest {
    Get(GetRequest),
    Put(PutRequest),
}

impl ClientRequest {
    pub fn client(&self) -> ClientId {
        match self {
            ClientRequest::Get(g) => g.client,
            ClientRequest::Put(p) => p.client,
        }
    }

    pub fn req(&self) -> RequestId {
        match self {
            ClientRequest::Get(g) => g.req,
            ClientRequest::Put(p) => p.req,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetReply {
    /// `None` when the key has no version yet.
    pub value: Option<Bytes>,
    pub write: Option<WriteId>,
    pub dc_id: DcId,
    pub log_idx: u64,
    pub t: HlcTimestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutReply {
    pub write: WriteId,
    pub dc_id: DcId,
    pub log_idx: u64,
    pub t: HlcTimestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailReason {
    NotLeader { hint: Option<NodeId> },
    WrongPartition,
    ParkTimeout,
    /// The accepting leader lost the entry to a newer term before it committed.
    Overwritten,
    ClientTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyBody {
    Get(GetReply),
    Put(PutReply),
    Failed(FailReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientReply {
    pub req: RequestId,
    pub body: ReplyBody,
}

/// One locally originated write on its way to another datacenter. `seq` is its position in
/// the origin group's stream of local writes, dense from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replicate {
    pub seq: u64,
    pub payload: ReplicationPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum XdcMessage {
    Replicate(Replicate),
    /// Receiver has applied the origin's stream up to `applied`.
    Ack { from_dc: DcId, applied: u64 },
    /// Receiver is not the leader; `hint` names the one it knows.
    Nack {
        from_dc: DcId,
        applied: u64,
        hint: Option<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetMessage {
    Raft(RaftMessage<ReplicationPayload>),
    Request(ClientRequest),
    Reply(ClientReply),
    Xdc(XdcMessage),
}
