//! Per-server versioned state: version chains, the stable vector, and last-writer-wins reads.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::hlc::HlcTimestamp;
use crate::types::{DcId, Key, OpRef, PartitionId, ReplicationPayload, Version, WriteId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredVersion {
    pub version: Version,
    pub write: WriteId,
    pub writer: Option<OpRef>,
    /// Position in this server's apply order; only used to pick what gc keeps.
    applied_seq: u64,
}

impl StoredVersion {
    /// Total order used to pick the winner. Equal `(t, dc_id)` pairs only arise from two
    /// leaders of one datacenter in different terms, and the origin index separates those.
    pub fn order_key(&self) -> (HlcTimestamp, DcId, u64) {
        (self.version.t, self.version.dc_id, self.write.idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied(WriteId),
    Deduplicated(WriteId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("commit of local index {index} delivered after index {last}")]
    OutOfOrder { index: u64, last: u64 },
    #[error("locally originated entry at index {index} claims origin {origin}")]
    ForeignUnassigned { index: u64, origin: DcId },
}

#[derive(Debug, Clone)]
pub struct Store {
    partition: PartitionId,
    local_dc: DcId,
    chains: HashMap<Key, Vec<StoredVersion>>,
    sv: Vec<u64>,
    stream_pos: Vec<u64>,
    last_local_index: u64,
    applied: u64,
    gc_window: usize,
}

impl Store {
    pub fn new(partition: PartitionId, local_dc: DcId, dcs: u16, gc_window: usize) -> Self {
        Store {
            partition,
            local_dc,
            chains: HashMap::new(),
            sv: vec![0; dcs as usize],
            stream_pos: vec![0; dcs as usize],
            last_local_index: 0,
            applied: 0,
            gc_window,
        }
    }

    pub fn sv(&self) -> &[u64] {
        &self.sv
    }

    /// Highest cross-datacenter stream position applied per origin datacenter.
    pub fn stream_pos(&self, origin: DcId) -> u64 {
        self.stream_pos[origin.index()]
    }

    pub fn last_local_index(&self) -> u64 {
        self.last_local_index
    }

    /// Identity a committed payload has (or will have) once applied at `local_index`.
    pub fn write_id(&self, payload: &ReplicationPayload, local_index: u64) -> WriteId {
        WriteId::new(
            self.partition,
            payload.origin_dc,
            payload.origin_idx.unwrap_or(local_index),
        )
    }

    /// Records that local log position `local_index` committed without carrying a write.
    pub fn skip(&mut self, local_index: u64) -> Result<(), StoreError> {
        self.advance_local(local_index)
    }

    fn advance_local(&mut self, index: u64) -> Result<(), StoreError> {
        if index <= self.last_local_index {
            return Err(StoreError::OutOfOrder {
                index,
                last: self.last_local_index,
            });
        }
        self.last_local_index = index;
        Ok(())
    }

    pub fn apply_commit(
        &mut self,
        payload: &ReplicationPayload,
        local_index: u64,
    ) -> Result<ApplyOutcome, StoreError> {
        if payload.origin_idx.is_none() && payload.origin_dc != self.local_dc {
            return Err(StoreError::ForeignUnassigned {
                index: local_index,
                origin: payload.origin_dc,
            });
        }
        self.advance_local(local_index)?;
        let origin = payload.origin_dc.index();
        let write = self.write_id(payload, local_index);
        if write.idx <= self.sv[origin] {
            return Ok(ApplyOutcome::Deduplicated(write));
        }
        self.sv[origin] = write.idx;
        if payload.origin_dc != self.local_dc {
            self.stream_pos[origin] = self.stream_pos[origin].max(payload.origin_seq);
        }
        self.applied += 1;
        let chain = self.chains.entry(payload.key.clone()).or_default();
        chain.push(StoredVersion {
            version: payload.version.clone(),
            write,
            writer: payload.writer,
            applied_seq: self.applied,
        });
        if chain.len() > 2 * self.gc_window + 2 {
            let key = payload.key.clone();
            self.gc_chain(&key);
        }
        Ok(ApplyOutcome::Applied(write))
    }

    pub fn read_latest(&self, key: &Key) -> Option<&StoredVersion> {
        self.chains
            .get(key)?
            .iter()
            .max_by_key(|v| v.order_key())
    }

    pub fn chain_len(&self, key: &Key) -> usize {
        self.chains.get(key).map_or(0, Vec::len)
    }

    /// Keeps the winner plus the `gc_window` most recently applied other versions.
    pub fn gc_chain(&mut self, key: &Key) -> usize {
        let Some(chain) = self.chains.get_mut(key) else {
            return 0;
        };
        let Some(winner) = chain.iter().max_by_key(|v| v.order_key()).map(|v| v.write) else {
            return 0;
        };
        let mut others: Vec<u64> = chain
            .iter()
            .filter(|v| v.write != winner)
            .map(|v| v.applied_seq)
            .collect();
        others.sort_unstable_by(|a, b| b.cmp(a));
        others.truncate(self.gc_window);
        chain.retain(|v| v.write == winner || others.contains(&v.applied_seq));
        chain.len()
    }

    /// The current winner of every key.
    pub fn winners(&self) -> BTreeMap<Key, WriteId> {
        self.chains
            .keys()
            .filter_map(|k| Some((k.clone(), self.read_latest(k)?.write)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::Bytes;
    use proptest::prelude::*;

    fn payload(key: &str, t: (u64, u16), dc: u16, origin_idx: Option<u64>) -> ReplicationPayload {
        ReplicationPayload {
            key: Key::from(key),
            version: Version {
                value: Bytes::from_static(b"v"),
                t: HlcTimestamp::new(t.0, t.1),
                dc_id: DcId(dc),
            },
            origin_dc: DcId(dc),
            origin_idx,
            origin_seq: 0,
            writer: None,
        }
    }

    fn store(sv: &[u64]) -> Store {
        let mut s = Store::new(PartitionId(0), DcId(0), sv.len() as u16, 4);
        s.sv = sv.to_vec();
        s
    }

    #[test]
    fn local_commit_sets_own_component() {
        let mut s = store(&[0, 0]);
        let out = s.apply_commit(&payload("k", (1, 0), 0, None), 1).unwrap();
        assert_eq!(out, ApplyOutcome::Applied(WriteId::new(PartitionId(0), DcId(0), 1)));
        assert_eq!(s.sv(), &[1, 0]);
        assert_eq!(s.chain_len(&Key::from("k")), 1);
    }

    #[test]
    fn replayed_remote_entry_is_deduplicated() {
        let mut s = Store::new(PartitionId(0), DcId(1), 2, 4);
        s.sv = vec![5, 2];
        let out = s.apply_commit(&payload("k", (1, 0), 0, Some(4)), 9).unwrap();
        assert!(matches!(out, ApplyOutcome::Deduplicated(_)));
        assert_eq!(s.sv(), &[5, 2]);
        assert_eq!(s.chain_len(&Key::from("k")), 0);
    }

    #[test]
    fn first_remote_write() {
        let mut s = store(&[0, 0]);
        s.apply_commit(&payload("k", (1, 0), 1, Some(1)), 1).unwrap();
        assert_eq!(s.sv(), &[0, 1]);
    }

    #[test]
    fn out_of_order_delivery_is_an_error() {
        let mut s = store(&[0, 0]);
        s.apply_commit(&payload("k", (1, 0), 0, None), 2).unwrap();
        assert_eq!(
            s.apply_commit(&payload("k", (2, 0), 0, None), 2),
            Err(StoreError::OutOfOrder { index: 2, last: 2 })
        );
    }

    #[test]
    fn read_latest_examples() {
        let mut s = store(&[0, 0]);
        assert!(s.read_latest(&Key::from("k")).is_none());
        s.apply_commit(&payload("k", (5, 0), 0, None), 1).unwrap();
        s.apply_commit(&payload("k", (7, 1), 1, Some(1)), 2).unwrap();
        assert_eq!(s.read_latest(&Key::from("k")).unwrap().version.t, HlcTimestamp::new(7, 1));

        let mut s = store(&[0, 0]);
        s.apply_commit(&payload("k", (5, 2), 0, None), 1).unwrap();
        s.apply_commit(&payload("k", (5, 2), 1, Some(1)), 2).unwrap();
        assert_eq!(s.read_latest(&Key::from("k")).unwrap().version.dc_id, DcId(1));
    }

    #[test]
    fn gc_examples() {
        let mut s = Store::new(PartitionId(0), DcId(0), 1, 4);
        // ten versions, the third one carries the highest timestamp
        for i in 1..=10u64 {
            let t = if i == 3 { 100 } else { i };
            s.apply_commit(&payload("k", (t, 0), 0, None), i).unwrap();
        }
        assert_eq!(s.gc_chain(&Key::from("k")), 5);
        assert_eq!(s.read_latest(&Key::from("k")).unwrap().write.idx, 3);

        let mut s = Store::new(PartitionId(0), DcId(0), 1, 4);
        s.apply_commit(&payload("k", (1, 0), 0, None), 1).unwrap();
        assert_eq!(s.gc_chain(&Key::from("k")), 1);

        let mut s = Store::new(PartitionId(0), DcId(0), 1, 0);
        s.apply_commit(&payload("k", (1, 0), 0, None), 1).unwrap();
        s.apply_commit(&payload("k", (9, 0), 0, None), 2).unwrap();
        assert_eq!(s.gc_chain(&Key::from("k")), 1);
        assert_eq!(s.read_latest(&Key::from("k")).unwrap().write.idx, 2);
    }

    fn brute_force_winner(vs: &[(u64, u16, u16, u64)]) -> (u64, u16, u16, u64) {
        let mut best = vs[0];
        for &v in vs {
            let better = v.0 > best.0
                || (v.0 == best.0 && v.1 > best.1)
                || (v.0 == best.0 && v.1 == best.1 && v.2 > best.2)
                || (v.0 == best.0 && v.1 == best.1 && v.2 == best.2 && v.3 > best.3);
            if better {
                best = v;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn winner_is_independent_of_apply_order(
            raw in proptest::collection::vec((0u64..6, 0u16..3, 0u16..3), 1..20),
            perm_seed: u64,
            window in 0usize..4,
        ) {
            // distinct origin indices per dc so every version is a distinct write
            let vs: Vec<(u64, u16, u16, u64)> = raw.iter().enumerate()
                .map(|(i, &(l, c, dc))| (l, c, dc, i as u64 + 1)).collect();
            let want = brute_force_winner(&vs);
            let mut order: Vec<usize> = (0..vs.len()).collect();
            let mut x = perm_seed | 1;
            for i in (1..order.len()).rev() {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                order.swap(i, (x % (i as u64 + 1)) as usize);
            }
            let mut s = Store::new(PartitionId(0), DcId(3), 3, window);
            // apply per-dc in increasing origin index, interleaving dcs by the permutation
            let mut per_dc: Vec<Vec<(u64, u16, u16, u64)>> = vec![Vec::new(); 3];
            for &i in &order { per_dc[vs[i].2 as usize].push(vs[i]); }
            for q in &mut per_dc { q.sort_by_key(|v| v.3); }
            let mut local = 0;
            let mut cursors = [0usize; 3];
            for &i in &order {
                let dc = vs[i].2 as usize;
                let v = per_dc[dc][cursors[dc]];
                cursors[dc] += 1;
                local += 1;
                s.apply_commit(&payload("k", (v.0, v.1), v.2, Some(v.3)), local).unwrap();
            }
            let got = s.read_latest(&Key::from("k")).unwrap();
            prop_assert_eq!(
                (got.version.t.l, got.version.t.c, got.version.dc_id.0, got.write.idx),
                want
            );
        }

        #[test]
        fn sv_components_never_decrease(
            ops in proptest::collection::vec((0u16..2, 1u64..30), 1..60)
        ) {
            let mut s = Store::new(PartitionId(0), DcId(0), 2, 2);
            let mut prev = s.sv().to_vec();
            for (local, (dc, idx)) in ops.into_iter().enumerate() {
                let p = if dc == 0 {
                    payload("k", (1, 0), 0, Some(idx))
                } else {
                    payload("k", (1, 0), 1, Some(idx))
                };
                s.apply_commit(&p, local as u64 + 1).unwrap();
                prop_assert!(s.sv().iter().zip(&prev).all(|(a, b)| a >= b));
                prev = s.sv().to_vec();
            }
        }
    }
}
