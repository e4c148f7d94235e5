//! Trace records and their newline-delimited JSON encoding.
//!
//! The first line is a [`TraceHeader`]; every following line is one [`TraceRecord`] with its
//! sequence number, simulated time in microseconds, and a `kind`-tagged event.

use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hlc::HlcTimestamp;
use crate::protocol::FailReason;
use crate::simnet::{SimTime, Topology};
use crate::types::{
    ClientId, DcId, Key, NodeId, OpRef, PartitionId, ReadLevel, RequestId, WriteId, WriteLevel,
};

pub const SCHEMA: &str = "sessionkv-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Get,
    Put,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub dcs: u16,
    pub partitions: u16,
    pub replicas: u16,
}

impl TraceHeader {
    pub fn new(config_hash: String, seed: u64, topo: Topology) -> Self {
        TraceHeader {
            schema: SCHEMA.to_string(),
            config_hash,
            seed,
            dcs: topo.dcs,
            partitions: topo.partitions,
            replicas: topo.replicas,
        }
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.dcs, self.partitions, self.replicas)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TraceEvent {
    GetIssued {
        client: ClientId,
        req: RequestId,
        key: Key,
        partition: PartitionId,
        level: ReadLevel,
        target: NodeId,
        hrv: Vec<u64>,
        hwv: Vec<u64>,
    },
    GetReplied {
        client: ClientId,
        req: RequestId,
        write: Option<WriteId>,
        dc_id: DcId,
        log_idx: u64,
        t: HlcTimestamp,
    },
    PutIssued {
        client: ClientId,
        req: RequestId,
        key: Key,
        partition: PartitionId,
        level: WriteLevel,
        hlc_mode: bool,
        target: NodeId,
        dt: HlcTimestamp,
    },
    PutReplied {
        client: ClientId,
        req: RequestId,
        write: WriteId,
        log_idx: u64,
        t: HlcTimestamp,
    },
    OpFailed {
        client: ClientId,
        req: RequestId,
        op: OpKind,
        reason: FailReason,
    },
    Parked {
        node: NodeId,
        client: ClientId,
        req: RequestId,
        op: OpKind,
    },
    GetServed {
        node: NodeId,
        client: ClientId,
        req: RequestId,
        key: Key,
        write: Option<WriteId>,
        t: HlcTimestamp,
        log_idx: u64,
        sv: Vec<u64>,
    },
    PutCommittedAtServer {
        node: NodeId,
        client: ClientId,
        req: RequestId,
        key: Key,
        write: WriteId,
        t: HlcTimestamp,
    },
    CommitApplied {
        node: NodeId,
        key: Key,
        write: WriteId,
        t: HlcTimestamp,
        writer: Option<OpRef>,
    },
    Deduplicated {
        node: NodeId,
        write: WriteId,
    },
    SvSnapshot {
        node: NodeId,
        sv: Vec<u64>,
    },
    Crash {
        node: NodeId,
    },
    Restart {
        node: NodeId,
    },
    FinalState {
        node: NodeId,
        partition: PartitionId,
        sv: Vec<u64>,
        winners: Vec<(Key, WriteId)>,
    },
    RaftMsg {
        from: NodeId,
        to: NodeId,
        tag: String,
        term: u64,
    },
}

impl TraceEvent {
    /// Records that describe a client operation end to end (as opposed to replica state).
    pub fn is_core(&self) -> bool {
        matches!(
            self,
            TraceEvent::GetIssued { .. }
                | TraceEvent::GetServed { .. }
                | TraceEvent::GetReplied { .. }
                | TraceEvent::PutIssued { .. }
                | TraceEvent::PutCommittedAtServer { .. }
                | TraceEvent::PutReplied { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub time_us: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn time(&self) -> SimTime {
        SimTime(self.time_us)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing header record")]
    MissingHeader,
    #[error("unsupported schema {0:?}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Trace {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, at: SimTime, event: TraceEvent) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            seq,
            time_us: at.micros(),
            event,
        });
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().map(|r| &r.event)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// SHA-256 of the encoded trace, hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        self.write_to(HashWriter(&mut h)).expect("hashing");
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut lines = r.lines().enumerate();
        let header: TraceHeader = loop {
            match lines.next() {
                None => return Err(TraceError::MissingHeader),
                Some((_, l)) if l.as_ref().is_ok_and(|s| s.trim().is_empty()) => continue,
                Some((i, l)) => {
                    break serde_json::from_str(&l?)
                        .map_err(|source| TraceError::Parse { line: i + 1, source })?
                }
            }
        };
        if header.schema != SCHEMA {
            return Err(TraceError::Schema(header.schema));
        }
        let mut records = Vec::new();
        for (i, l) in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&l).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            records.push(rec);
        }
        Ok(Trace { header, records })
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of arbitrary bytes, hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader::new("abc".into(), 9, Topology::new(2, 1, 3))
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = Trace::new(header());
        let text = String::from_utf8(t.to_ndjson()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"schema\":\"sessionkv-trace/1\""));
    }

    #[test]
    fn round_trip_preserves_records_and_hash() {
        let mut t = Trace::new(header());
        t.push(
            SimTime(1500),
            TraceEvent::SvSnapshot {
                node: NodeId(2),
                sv: vec![3, 4],
            },
        );
        t.push(
            SimTime(2000),
            TraceEvent::CommitApplied {
                node: NodeId(1),
                key: Key::from("k"),
                write: WriteId { p: 0, dc: 1, idx: 7 },
                t: HlcTimestamp::new(12, 3),
                writer: Some(OpRef {
                    client: ClientId(4),
                    req: RequestId(5),
                }),
            },
        );
        let bytes = t.to_ndjson();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"t\":{\"l\":12,\"c\":3}"), "{text}");
        assert!(text.contains("{\"seq\":0,\"time_us\":1500,\"kind\":\"SvSnapshot\""), "{text}");
        let back = Trace::read_from(&bytes[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
        assert_eq!(t.hash(), sha256_hex(&bytes));
    }

    #[test]
    fn rejects_foreign_schema() {
        let text = "{\"schema\":\"other/2\",\"config_hash\":\"\",\"seed\":0,\"dcs\":1,\"partitions\":1,\"replicas\":1}\n";
        assert!(matches!(Trace::read_from(text.as_bytes()), Err(TraceError::Schema(_))));
        assert!(matches!(Trace::read_from("".as_bytes()), Err(TraceError::MissingHeader)));
    }
}
