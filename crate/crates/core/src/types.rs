//! Identifiers and values shared by every layer of the store.

use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::hlc::HlcTimestamp;

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(
            Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(DcId, u16, "dc");
id_type!(PartitionId, u16, "p");
id_type!(NodeId, u32, "n");
id_type!(ClientId, u32, "c");
id_type!(RequestId, u64, "r");

/// Key bytes. Workload keys are printable ASCII, so traces carry them as strings.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub Bytes);

impl Key {
    pub fn from_static(s: &'static str) -> Self {
        Key(Bytes::from_static(s.as_bytes()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<String> for Key {
    fn from(s: String) -> Self {
        Key(Bytes::from(s.into_bytes()))
    }
}

impl From<&str> for Key {
    fn from(s: &str) -> Self {
        Key(Bytes::copy_from_slice(s.as_bytes()))
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) => s.serialize_str(text),
            Err(_) => Err(serde::ser::Error::custom("non-utf8 key")),
        }
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Key::from(s))
    }
}

/// Maps keys onto partitions with FNV-1a.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partitioner {
    pub partitions: u16,
}

impl Partitioner {
    pub fn new(partitions: u16) -> Self {
        assert!(partitions > 0, "at least one partition");
        Partitioner { partitions }
    }

    pub fn partition_of(&self, key: &Key) -> PartitionId {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        PartitionId((h % self.partitions as u64) as u16)
    }
}

/// System-wide identity of a committed write: the partition it belongs to, the datacenter
/// that accepted it, and its index in that datacenter's log for the partition.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WriteId {
    pub p: u16,
    pub dc: u16,
    pub idx: u64,
}

impl WriteId {
    pub fn new(p: PartitionId, dc: DcId, idx: u64) -> Self {
        WriteId { p: p.0, dc: dc.0, idx }
    }
}

impl fmt::Debug for WriteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w(p{},dc{},{})", self.p, self.dc, self.idx)
    }
}

impl fmt::Display for WriteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The client operation that produced a write. Carried with the write for tracing only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpRef {
    pub client: ClientId,
    pub req: RequestId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub value: Bytes,
    pub t: HlcTimestamp,
    pub dc_id: DcId,
}

/// What a group replicates through its log. `origin_idx` is `None` while a locally
/// accepted write waits for its first commit; the commit index becomes its origin index.
/// `origin_seq` is the write's position among the origin group's local writes and is only
/// set on entries that arrived through cross-datacenter replication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationPayload {
    pub key: Key,
    pub version: Version,
    pub origin_dc: DcId,
    pub origin_idx: Option<u64>,
    pub origin_seq: u64,
    pub writer: Option<OpRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReadLevel {
    Eventual,
    MonotonicRead,
    ReadYourWrite,
    MonotonicReadYourWrite,
}

impl ReadLevel {
    pub const ALL: [ReadLevel; 4] = [
        ReadLevel::Eventual,
        ReadLevel::MonotonicRead,
        ReadLevel::ReadYourWrite,
        ReadLevel::MonotonicReadYourWrite,
    ];

    pub fn wants_monotonic_read(self) -> bool {
        matches!(self, ReadLevel::MonotonicRead | ReadLevel::MonotonicReadYourWrite)
    }

    pub fn wants_read_your_write(self) -> bool {
        matches!(self, ReadLevel::ReadYourWrite | ReadLevel::MonotonicReadYourWrite)
    }

    pub fn short(self) -> &'static str {
        match self {
            ReadLevel::Eventual => "E",
            ReadLevel::MonotonicRead => "MR",
            ReadLevel::ReadYourWrite => "RYW",
            ReadLevel::MonotonicReadYourWrite => "MRYW",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WriteLevel {
    Eventual,
    MonotonicWrite,
    WriteFollowsReads,
    MonotonicWriteFollowsReads,
}

impl WriteLevel {
    pub const ALL: [WriteLevel; 4] = [
        WriteLevel::Eventual,
        WriteLevel::MonotonicWrite,
        WriteLevel::WriteFollowsReads,
        WriteLevel::MonotonicWriteFollowsReads,
    ];

    pub fn wants_monotonic_write(self) -> bool {
        matches!(
            self,
            WriteLevel::MonotonicWrite | WriteLevel::MonotonicWriteFollowsReads
        )
    }

    pub fn wants_write_follows_reads(self) -> bool {
        matches!(
            self,
            WriteLevel::WriteFollowsReads | WriteLevel::MonotonicWriteFollowsReads
        )
    }

    pub fn short(self) -> &'static str {
        match self {
            WriteLevel::Eventual => "E",
            WriteLevel::MonotonicWrite => "MW",
            WriteLevel::WriteFollowsReads => "WFR",
            WriteLevel::MonotonicWriteFollowsReads => "MWWFR",
        }
    }
}

/// Builds the fixed-width workload key for index `i` (16 bytes).
pub fn workload_key(i: u64) -> Key {
    Key::from(format!("k{:015}", i))
}

/// Builds a 64-byte value that names its writer.
pub fn workload_value(client: ClientId, req: RequestId) -> Bytes {
    let mut s = format!("v-{}-{}-", client.0, req.0);
    while s.len() < 64 {
        s.push('.');
    }
    s.truncate(64);
    Bytes::from(s.into_bytes())
}
