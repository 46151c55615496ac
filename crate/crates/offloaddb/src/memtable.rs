//! Ordered in-memory write buffer. Each entry carries the WAL offset of
//! the record that produced it, so an immutable MemTable can be flushed
//! by shipping offsets instead of payloads.

use std::collections::BTreeMap;
use std::ops::Bound;

use crate::wal::{WalRecord, OP_DELETE, OP_PUT};

/// Latest operation on a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Put(Vec<u8>),
    Delete,
}

impl Op {
    pub fn wal_op(&self) -> u8 {
        match self {
            Op::Put(_) => OP_PUT,
            Op::Delete => OP_DELETE,
        }
    }

    pub fn value_len(&self) -> usize {
        match self {
            Op::Put(v) => v.len(),
            Op::Delete => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemEntry {
    pub seq: u64,
    /// Byte offset of this entry's record in the WAL.
    pub wal_offset: u64,
    pub op: Op,
}

/// Fixed per-entry overhead charged against the byte budget.
const ENTRY_OVERHEAD: u64 = 48;

fn entry_charge(key: &[u8], entry: &MemEntry) -> u64 {
    key.len() as u64 + entry.op.value_len() as u64 + ENTRY_OVERHEAD
}

/// Ordered key -> latest-entry index. Whether a table is active or
/// immutable is decided by its owner; the structure itself stops changing
/// once the owner stops inserting.
#[derive(Debug, Default, Clone)]
pub struct MemTable {
    map: BTreeMap<Vec<u8>, MemEntry>,
    bytes: u64,
    /// Smallest WAL offset ever inserted (conservative under overwrites:
    /// never raised, so released prefixes only shrink).
    min_wal_offset: Option<u64>,
}

impl MemTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: Vec<u8>, entry: MemEntry) {
        self.min_wal_offset = Some(match self.min_wal_offset {
            Some(m) => m.min(entry.wal_offset),
            None => entry.wal_offset,
        });
        self.bytes += entry_charge(&key, &entry);
        let key_len = key.len() as u64;
        if let Some(old) = self.map.insert(key, entry) {
            self.bytes -= key_len + old.op.value_len() as u64 + ENTRY_OVERHEAD;
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&MemEntry> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Budget-accounted size: keys + values + fixed overhead per entry.
    pub fn approx_bytes(&self) -> u64 {
        self.bytes
    }

    pub fn min_wal_offset(&self) -> Option<u64> {
        self.min_wal_offset
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u8>, &MemEntry)> {
        self.map.iter()
    }

    pub fn range_from<'a>(
        &'a self,
        start: &[u8],
    ) -> impl Iterator<Item = (&'a Vec<u8>, &'a MemEntry)> {
        self.map
            .range::<[u8], _>((Bound::Included(start), Bound::Unbounded))
    }

    /// WAL offsets of live entries in ascending key order — the flush
    /// payload that replaces shipping the data itself.
    pub fn offset_array(&self) -> Vec<u64> {
        self.map.values().map(|e| e.wal_offset).collect()
    }

    /// Key bounds of the table, `None` when empty.
    pub fn key_bounds(&self) -> Option<(&[u8], &[u8])> {
        let first = self.map.keys().next()?;
        let last = self.map.keys().next_back()?;
        Some((first.as_slice(), last.as_slice()))
    }

    /// Sequence-number bounds over live entries.
    pub fn seq_bounds(&self) -> Option<(u64, u64)> {
        let mut it = self.map.values().map(|e| e.seq);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), s| (lo.min(s), hi.max(s))))
    }

    /// Byte span `[lo, hi)` of this table's records in the WAL.
    pub fn wal_span(&self) -> Option<(u64, u64)> {
        if self.map.is_empty() {
            return None;
        }
        let mut lo = u64::MAX;
        let mut hi = 0u64;
        for (key, e) in &self.map {
            lo = lo.min(e.wal_offset);
            hi = hi.max(e.wal_offset + WalRecord::frame_len(key.len(), e.op.value_len()));
        }
        Some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(seq: u64, off: u64, v: &[u8]) -> MemEntry {
        MemEntry {
            seq,
            wal_offset: off,
            op: Op::Put(v.to_vec()),
        }
    }

    #[test]
    fn ascending_iteration_and_overwrite() {
        let mut mt = MemTable::new();
        mt.insert(b"b".to_vec(), put(1, 0, b"1"));
        mt.insert(b"a".to_vec(), put(2, 100, b"2"));
        mt.insert(b"b".to_vec(), put(3, 200, b"3"));
        let keys: Vec<_> = mt.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(keys, vec![b"a".to_vec(), b"b".to_vec()]);
        assert_eq!(mt.get(b"b").unwrap().seq, 3);
        assert_eq!(mt.len(), 2);
    }

    #[test]
    fn offset_array_is_key_ordered() {
        // Insertion order B,D,A,C,E at offsets 0,2K,4K,6K,8K.
        let mut mt = MemTable::new();
        for (key, off) in [("B", 0u64), ("D", 2048), ("A", 4096), ("C", 6144), ("E", 8192)] {
            mt.insert(key.as_bytes().to_vec(), put(off / 64 + 1, off, b"x"));
        }
        assert_eq!(mt.offset_array(), vec![4096, 0, 6144, 2048, 8192]);
    }

    #[test]
    fn byte_budget_tracks_replacements() {
        let mut mt = MemTable::new();
        mt.insert(b"k".to_vec(), put(1, 0, &[0u8; 100]));
        let first = mt.approx_bytes();
        mt.insert(b"k".to_vec(), put(2, 200, &[0u8; 10]));
        assert!(mt.approx_bytes() < first);
        mt.insert(
            b"k".to_vec(),
            MemEntry {
                seq: 3,
                wal_offset: 300,
                op: Op::Delete,
            },
        );
        assert_eq!(mt.len(), 1);
        assert!(mt.approx_bytes() > 0);
    }

    #[test]
    fn spans_and_bounds() {
        let mut mt = MemTable::new();
        assert!(mt.wal_span().is_none());
        mt.insert(b"m".to_vec(), put(5, 1000, b"vvv"));
        mt.insert(b"a".to_vec(), put(6, 2000, b"w"));
        let (lo, hi) = mt.wal_span().unwrap();
        assert_eq!(lo, 1000);
        assert_eq!(hi, 2000 + WalRecord::frame_len(1, 1));
        assert_eq!(mt.key_bounds().unwrap(), (b"a".as_ref(), b"m".as_ref()));
        assert_eq!(mt.seq_bounds().unwrap(), (5, 6));
        assert_eq!(mt.min_wal_offset(), Some(1000));
    }
}
