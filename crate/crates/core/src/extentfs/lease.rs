//! Leases: the block-access permissions granted to offloaded tasks.
//!
//! A lease names the physical extents a task may read (`read_set`) and
//! write (`write_set`), plus per-file mtime hints used by the target-side
//! cache for staleness bypass. While a lease is active, initiator I/O to
//! its write-set blocks is rejected, and no other lease may overlap those
//! blocks with either set.

use std::collections::HashMap;

use crate::volume::BlockRange;

use super::Ino;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeaseId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaseExtent {
    pub ino: Ino,
    /// Byte offset within the file where this physical range begins.
    pub logical: u64,
    pub range: BlockRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaseState {
    Active,
    Completed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct Lease {
    pub id: LeaseId,
    pub read_set: Vec<LeaseExtent>,
    pub write_set: Vec<LeaseExtent>,
    pub mtime_hints: Vec<(Ino, u64)>,
    pub state: LeaseState,
    read_cover: Vec<BlockRange>,
    write_cover: Vec<BlockRange>,
}

/// Sorts and merges ranges into a minimal disjoint ascending cover.
pub fn normalize(ranges: impl Iterator<Item = BlockRange>) -> Vec<BlockRange> {
    let mut v: Vec<BlockRange> = ranges.filter(|r| r.len > 0).collect();
    v.sort_by_key(|r| r.start);
    let mut out: Vec<BlockRange> = Vec::with_capacity(v.len());
    for r in v {
        match out.last_mut() {
            Some(last) if r.start <= last.end() => {
                last.len = last.len.max(r.end() - last.start);
            }
            _ => out.push(r),
        }
    }
    out
}

/// True iff `range` lies entirely inside the normalized cover. Because the
/// cover is merged, containment can only hold within a single element.
pub fn covered(cover: &[BlockRange], range: &BlockRange) -> bool {
    if range.len == 0 {
        return false;
    }
    let idx = cover.partition_point(|c| c.start <= range.start);
    idx > 0 && cover[idx - 1].contains_range(range)
}

/// True iff `range` overlaps any element of the cover.
pub fn overlaps_cover(cover: &[BlockRange], range: &BlockRange) -> bool {
    if range.len == 0 {
        return false;
    }
    let idx = cover.partition_point(|c| c.end() <= range.start);
    idx < cover.len() && cover[idx].start < range.end()
}

impl Lease {
    pub fn new(
        id: LeaseId,
        read_set: Vec<LeaseExtent>,
        write_set: Vec<LeaseExtent>,
        mtime_hints: Vec<(Ino, u64)>,
    ) -> Self {
        let read_cover = normalize(read_set.iter().map(|e| e.range));
        let write_cover = normalize(write_set.iter().map(|e| e.range));
        Self {
            id,
            read_set,
            write_set,
            mtime_hints,
            state: LeaseState::Active,
            read_cover,
            write_cover,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == LeaseState::Active
    }

    /// Range containment in the read set (reads are authorized only there).
    pub fn authorizes_read(&self, range: &BlockRange) -> bool {
        covered(&self.read_cover, range)
    }

    pub fn authorizes_write(&self, range: &BlockRange) -> bool {
        covered(&self.write_cover, range)
    }

    pub fn read_cover(&self) -> &[BlockRange] {
        &self.read_cover
    }

    pub fn write_cover(&self) -> &[BlockRange] {
        &self.write_cover
    }

    /// The hint for one file, if the lease carries it.
    pub fn hint_for(&self, ino: Ino) -> Option<u64> {
        self.mtime_hints
            .iter()
            .find(|(i, _)| *i == ino)
            .map(|(_, m)| *m)
    }
}

#[derive(Debug, Default)]
pub struct LeaseTable {
    leases: HashMap<u64, Lease>,
    next_id: u64,
}

impl LeaseTable {
    pub fn insert(&mut self, lease: Lease) {
        self.leases.insert(lease.id.0, lease);
    }

    pub fn next_id(&mut self) -> LeaseId {
        self.next_id += 1;
        LeaseId(self.next_id)
    }

    pub fn get(&self, id: LeaseId) -> Option<&Lease> {
        self.leases.get(&id.0)
    }

    pub fn get_mut(&mut self, id: LeaseId) -> Option<&mut Lease> {
        self.leases.get_mut(&id.0)
    }

    pub fn active(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values().filter(|l| l.is_active())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    /// Would initiator I/O to `range` collide with an active write set?
    pub fn write_set_overlaps(&self, range: &BlockRange) -> Option<LeaseId> {
        self.active()
            .find(|l| overlaps_cover(&l.write_cover, range))
            .map(|l| l.id)
    }

    /// Would freeing/deleting `range` collide with any active lease set?
    pub fn any_set_overlaps(&self, range: &BlockRange) -> Option<LeaseId> {
        self.active()
            .find(|l| {
                overlaps_cover(&l.read_cover, range) || overlaps_cover(&l.write_cover, range)
            })
            .map(|l| l.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(start: u64, len: u64) -> BlockRange {
        BlockRange::new(start, len)
    }

    #[test]
    fn normalize_merges_adjacent_and_overlapping() {
        let cover = normalize(vec![r(10, 2), r(3, 2), r(5, 1), r(12, 4), r(20, 0)].into_iter());
        assert_eq!(cover, vec![r(3, 3), r(10, 6)]);
    }

    #[test]
    fn covered_is_exact() {
        let cover = normalize(vec![r(3, 3), r(10, 6)].into_iter());
        assert!(covered(&cover, &r(3, 3)));
        assert!(covered(&cover, &r(4, 1)));
        assert!(covered(&cover, &r(10, 6)));
        assert!(covered(&cover, &r(15, 1)));
        assert!(!covered(&cover, &r(2, 2)));
        assert!(!covered(&cover, &r(5, 2))); // crosses the gap
        assert!(!covered(&cover, &r(15, 2))); // runs past the end
        assert!(!covered(&cover, &r(9, 1)));
        assert!(!covered(&cover, &r(0, 0)));
    }

    #[test]
    fn overlap_is_exact() {
        let cover = vec![r(3, 3), r(10, 6)];
        assert!(overlaps_cover(&cover, &r(0, 4)));
        assert!(overlaps_cover(&cover, &r(5, 10)));
        assert!(overlaps_cover(&cover, &r(15, 5)));
        assert!(!overlaps_cover(&cover, &r(0, 3)));
        assert!(!overlaps_cover(&cover, &r(6, 4)));
        assert!(!overlaps_cover(&cover, &r(16, 2)));
    }

    #[test]
    fn lease_authorization_uses_the_right_set() {
        let lease = Lease::new(
            LeaseId(1),
            vec![LeaseExtent {
                ino: Ino(1),
                logical: 0,
                range: r(4, 2),
            }],
            vec![LeaseExtent {
                ino: Ino(2),
                logical: 0,
                range: r(8, 2),
            }],
            vec![(Ino(1), 5)],
        );
        assert!(lease.authorizes_read(&r(4, 2)));
        assert!(!lease.authorizes_read(&r(8, 1))); // write set does not grant reads
        assert!(lease.authorizes_write(&r(8, 2)));
        assert!(!lease.authorizes_write(&r(4, 1)));
        assert_eq!(lease.hint_for(Ino(1)), Some(5));
        assert_eq!(lease.hint_for(Ino(3)), None);
    }

    #[test]
    fn table_conflict_queries_ignore_inactive() {
        let mut t = LeaseTable::default();
        let id = t.next_id();
        t.insert(Lease::new(
            id,
            vec![],
            vec![LeaseExtent {
                ino: Ino(1),
                logical: 0,
                range: r(10, 4),
            }],
            vec![],
        ));
        assert_eq!(t.write_set_overlaps(&r(12, 1)), Some(id));
        assert_eq!(t.write_set_overlaps(&r(14, 2)), None);
        t.get_mut(id).unwrap().state = LeaseState::Completed;
        assert_eq!(t.write_set_overlaps(&r(12, 1)), None);
        assert_eq!(t.active_count(), 0);
    }
}
