//! Free-space bitmap with a next-fit run allocator.

use crate::volume::BlockRange;

/// One bit per block over the whole volume; metadata blocks are marked
/// allocated at mkfs so `allocated + free == block_count` always holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    bits: Vec<u8>,
    block_count: u64,
    free: u64,
    cursor: u64,
}

impl Bitmap {
    pub fn new_all_free(block_count: u64) -> Self {
        Self {
            bits: vec![0u8; block_count.div_ceil(8) as usize],
            block_count,
            free: block_count,
            cursor: 0,
        }
    }

    pub fn from_bytes(bits: Vec<u8>, block_count: u64) -> Self {
        assert_eq!(bits.len() as u64, block_count.div_ceil(8));
        let mut free = 0;
        for b in 0..block_count {
            if bits[(b / 8) as usize] & (1 << (b % 8)) == 0 {
                free += 1;
            }
        }
        Self {
            bits,
            block_count,
            free,
            cursor: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.clone()
    }

    pub fn block_count(&self) -> u64 {
        self.block_count
    }

    pub fn free_blocks(&self) -> u64 {
        self.free
    }

    pub fn allocated_blocks(&self) -> u64 {
        self.block_count - self.free
    }

    pub fn is_allocated(&self, block: u64) -> bool {
        self.bits[(block / 8) as usize] & (1 << (block % 8)) != 0
    }

    fn set(&mut self, block: u64) {
        self.bits[(block / 8) as usize] |= 1 << (block % 8);
    }

    fn clear(&mut self, block: u64) {
        self.bits[(block / 8) as usize] &= !(1 << (block % 8));
    }

    /// Marks a range allocated. Panics if any block already is: ownership
    /// is exclusive and double allocation is a logic error, not a runtime
    /// condition.
    pub fn mark_allocated(&mut self, range: BlockRange) {
        for b in range.start..range.end() {
            assert!(!self.is_allocated(b), "double allocation of block {}", b);
            self.set(b);
        }
        self.free -= range.len;
    }

    /// Marks a range free. Panics if any block already is.
    pub fn mark_free(&mut self, range: BlockRange) {
        for b in range.start..range.end() {
            assert!(self.is_allocated(b), "double free of block {}", b);
            self.clear(b);
        }
        self.free += range.len;
    }

    fn free_run_at(&self, start: u64, limit: u64, want: u64) -> u64 {
        let mut n = 0;
        while start + n < limit && n < want && !self.is_allocated(start + n) {
            n += 1;
        }
        n
    }

    /// Allocates `want` blocks inside `region`, preferring contiguous runs.
    /// Uses a next-fit cursor so sequential workloads stay mostly
    /// contiguous. Returns the ranges in allocation order, or `None` (with
    /// nothing allocated) if fewer than `want` blocks are free in the
    /// region.
    pub fn allocate(&mut self, want: u64, region: BlockRange) -> Option<Vec<BlockRange>> {
        if want == 0 {
            return Some(Vec::new());
        }
        let mut picked: Vec<BlockRange> = Vec::new();
        let mut remaining = want;
        let start_cursor = self.cursor.clamp(region.start, region.end());
        // Two passes: cursor → end, then region start → cursor.
        let spans = [(start_cursor, region.end()), (region.start, start_cursor)];
        'outer: for (lo, hi) in spans {
            let mut b = lo;
            while b < hi {
                if self.is_allocated(b) {
                    b += 1;
                    continue;
                }
                let run = self.free_run_at(b, hi, remaining);
                picked.push(BlockRange::new(b, run));
                remaining -= run;
                b += run;
                if remaining == 0 {
                    break 'outer;
                }
                b += 1; // the block after the run is allocated
            }
        }
        if remaining > 0 {
            return None;
        }
        for r in &picked {
            self.mark_allocated(*r);
        }
        self.cursor = picked.last().map(|r| r.end()).unwrap_or(region.start);
        Some(picked)
    }
}
