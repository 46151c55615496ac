//! Offloadable task bodies: the log recycler and the compaction merge.
//!
//! Both run under a lease through `LeaseIo`, so the same function serves
//! as the registered engine stub and as the initiator-local fallback —
//! output bytes are identical wherever it executes.

use std::sync::Arc;

use offload_core::engine::OffloadEngine;
use offload_core::{BlockAddr, Ino, LeaseIo, TaskFn};

use crate::codec::{put_bytes16, put_u32, put_u64, Reader};
use crate::sstable::{SstBuilder, SstInfo};
use crate::wal::{WalRecord, OP_DELETE};

pub const STUB_LOG_RECYCLE: &str = "db.log_recycle";
pub const STUB_MERGE: &str = "db.merge";

/// Registers both stubs with an engine (idempotent per engine lifetime).
pub fn register_stubs(engine: &OffloadEngine) -> Result<(), offload_core::engine::EngineError> {
    engine.register_stub(STUB_LOG_RECYCLE, recycle_task_fn())?;
    engine.register_stub(STUB_MERGE, merge_task_fn())?;
    Ok(())
}

pub fn recycle_task_fn() -> TaskFn {
    Arc::new(|ctx, args| log_recycle_stub(ctx, args))
}

pub fn merge_task_fn() -> TaskFn {
    Arc::new(|ctx, args| merge_stub(ctx, args))
}

/// Byte-granular reader over the leased extents of one file.
struct ReadView<'a> {
    ctx: &'a LeaseIo,
    extents: Vec<offload_core::LeaseExtent>,
    bs: u64,
}

impl<'a> ReadView<'a> {
    fn new(ctx: &'a LeaseIo, ino: Ino) -> Self {
        let mut extents: Vec<_> = ctx
            .read_set()
            .iter()
            .filter(|e| e.ino == ino)
            .cloned()
            .collect();
        extents.sort_by_key(|e| e.logical);
        Self {
            ctx,
            extents,
            bs: ctx.block_size() as u64,
        }
    }

    /// Reads `len` bytes at file offset `off` through the lease (and the
    /// offload cache when one is attached).
    fn read_at(&self, mut off: u64, len: u64) -> Result<Vec<u8>, String> {
        let mut out = Vec::with_capacity(len as usize);
        let mut remaining = len;
        while remaining > 0 {
            let e = self
                .extents
                .iter()
                .find(|e| e.logical <= off && off < e.logical + e.range.len * self.bs)
                .ok_or_else(|| format!("file offset {off} outside leased extents"))?;
            let intra = off - e.logical;
            let first_block = e.range.start + intra / self.bs;
            let block_off = intra % self.bs;
            let avail = e.range.len * self.bs - intra;
            let take = avail.min(remaining);
            let blocks = (block_off + take).div_ceil(self.bs) as u32;
            let data = self
                .ctx
                .offload_read(BlockAddr(first_block), blocks)
                .map_err(|e| e.to_string())?;
            out.extend_from_slice(&data[block_off as usize..(block_off + take) as usize]);
            off += take;
            remaining -= take;
        }
        Ok(out)
    }
}

/// Writes one output file image across its leased extents, then declares
/// the exact byte length so the unused tail is returned on completion.
fn write_output(ctx: &LeaseIo, ino: Ino, image: &[u8]) -> Result<(), String> {
    let bs = ctx.block_size() as u64;
    let targets: Vec<(usize, offload_core::LeaseExtent)> = ctx
        .write_set()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.ino == ino)
        .map(|(i, e)| (i, e.clone()))
        .collect();
    if targets.is_empty() {
        return Err(format!("no write extents leased for {ino}"));
    }
    let mut padded = image.to_vec();
    let pad = (bs - padded.len() as u64 % bs) % bs;
    padded.resize(padded.len() + pad as usize, 0);

    let mut written = 0u64;
    for (idx, e) in &targets {
        let cap = e.range.len * bs;
        if written < padded.len() as u64 {
            let take = cap.min(padded.len() as u64 - written);
            debug_assert_eq!(take % bs, 0);
            ctx.offload_write(
                BlockAddr(e.range.start),
                &padded[written as usize..(written + take) as usize],
            )
            .map_err(|err| err.to_string())?;
            written += take;
        }
        // Exact byte watermark for this extent of the file.
        let file_span = e.logical..e.logical + cap;
        let real = (image.len() as u64).clamp(file_span.start, file_span.end) - file_span.start;
        ctx.declare_written(*idx, real).map_err(|e| e.to_string())?;
    }
    if written < padded.len() as u64 {
        return Err(format!(
            "output {ino} needs {} bytes but only {written} are leased",
            padded.len()
        ));
    }
    Ok(())
}

/// One logical input to a merge: where the frames come from.
enum MergeInput {
    Materialized { ino: Ino, data_bytes: u64 },
    WalBacked { ino: Ino, lo: u64, hi: u64, offsets: Vec<u64> },
}

/// Loads an input into `(key, op, seq, value)` rows in ascending key
/// order, reading every underlying block exactly once.
fn load_input(ctx: &LeaseIo, input: &MergeInput) -> Result<Vec<(Vec<u8>, u8, u64, Vec<u8>)>, String> {
    match input {
        MergeInput::Materialized { ino, data_bytes } => {
            let view = ReadView::new(ctx, *ino);
            let data = view.read_at(0, *data_bytes)?;
            let mut rows = Vec::new();
            let mut pos = 0usize;
            while (pos as u64) < *data_bytes {
                let (key, op, seq, value, next) =
                    crate::sstable::parse_frame(&data, pos).map_err(|e| e.to_string())?;
                rows.push((key, op, seq, value));
                pos = next;
            }
            Ok(rows)
        }
        MergeInput::WalBacked { ino, lo, hi, offsets } => {
            let view = ReadView::new(ctx, *ino);
            if *hi < *lo {
                return Err("wal span ends before it starts".into());
            }
            let span = view.read_at(*lo, hi - lo)?;
            let mut rows = Vec::with_capacity(offsets.len());
            for off in offsets {
                if *off < *lo || *off >= *hi {
                    return Err(format!("wal offset {off} outside span [{lo}, {hi})"));
                }
                let rel = (off - lo) as usize;
                let (rec, _) = WalRecord::decode(&span[rel..]).map_err(|e| e.to_string())?;
                rows.push((rec.key, rec.op, rec.seq, rec.value));
            }
            Ok(rows)
        }
    }
}

/// Streams merged rows into per-output builders, closing an output when
/// the next frame would overflow its capacity. Returns the non-empty
/// output summaries in the order written.
fn build_outputs(
    ctx: &LeaseIo,
    rows: Vec<(Vec<u8>, u8, u64, Vec<u8>)>,
    outputs: &[(Ino, u64)],
) -> Result<Vec<(Ino, SstInfo)>, String> {
    let mut done: Vec<(Ino, SstInfo)> = Vec::new();
    let mut slot = 0usize;
    let mut builder: Option<SstBuilder> = None;
    for (key, op, seq, value) in rows {
        loop {
            let b = match builder.as_mut() {
                Some(b) => b,
                None => {
                    if slot >= outputs.len() {
                        return Err("merge ran out of output tables".into());
                    }
                    builder = Some(SstBuilder::new(outputs[slot].1));
                    builder.as_mut().unwrap()
                }
            };
            if b.fits(key.len(), value.len()) {
                b.add(&key, op, seq, &value);
                break;
            }
            let full = builder.take().unwrap();
            let (image, info) = full.finish();
            write_output(ctx, outputs[slot].0, &image)?;
            done.push((outputs[slot].0, info));
            slot += 1;
        }
    }
    if let Some(b) = builder {
        if !b.is_empty() {
            let (image, info) = b.finish();
            write_output(ctx, outputs[slot].0, &image)?;
            done.push((outputs[slot].0, info));
        }
    }
    Ok(done)
}

fn encode_results(results: &[(Ino, SstInfo)]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, results.len() as u32);
    for (ino, info) in results {
        put_u32(&mut out, ino.0);
        put_u64(&mut out, info.file_bytes);
        put_u64(&mut out, info.data_bytes);
        put_u32(&mut out, info.entry_count);
        put_u32(&mut out, info.max_frame);
        put_u64(&mut out, info.min_seq);
        put_u64(&mut out, info.max_seq);
        put_bytes16(&mut out, &info.smallest);
        put_bytes16(&mut out, &info.largest);
    }
    out
}

/// Parses a stub result back into `(ino, info)` rows.
pub fn decode_results(buf: &[u8]) -> Result<Vec<(Ino, SstInfo)>, String> {
    let mut r = Reader::new(buf);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ino = Ino(r.u32()?);
        let file_bytes = r.u64()?;
        let data_bytes = r.u64()?;
        let entry_count = r.u32()?;
        let max_frame = r.u32()?;
        let min_seq = r.u64()?;
        let max_seq = r.u64()?;
        let smallest = r.bytes16()?;
        let largest = r.bytes16()?;
        out.push((
            ino,
            SstInfo {
                entry_count,
                data_bytes,
                file_bytes,
                max_frame,
                min_seq,
                max_seq,
                smallest,
                largest,
            },
        ));
    }
    r.done()?;
    Ok(out)
}

/// Arguments for the log recycler.
pub fn encode_recycle_args(
    wal_ino: Ino,
    lo: u64,
    hi: u64,
    offsets: &[u64],
    out_ino: Ino,
    cap_bytes: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, wal_ino.0);
    put_u64(&mut out, lo);
    put_u64(&mut out, hi);
    put_u32(&mut out, offsets.len() as u32);
    for off in offsets {
        put_u64(&mut out, *off);
    }
    put_u32(&mut out, out_ino.0);
    put_u64(&mut out, cap_bytes);
    out
}

/// Materializes one WAL-backed table: reads the records named by the
/// offset array (each WAL block once, through the cache) and emits them
/// in array order — ascending keys — into the output extents.
pub fn log_recycle_stub(ctx: &LeaseIo, args: &[u8]) -> Result<Vec<u8>, String> {
    let mut r = Reader::new(args);
    let wal_ino = Ino(r.u32()?);
    let lo = r.u64()?;
    let hi = r.u64()?;
    let n = r.u32()? as usize;
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        offsets.push(r.u64()?);
    }
    let out_ino = Ino(r.u32()?);
    let cap = r.u64()?;
    r.done()?;

    if offsets.is_empty() {
        return Ok(encode_results(&[]));
    }
    let rows = load_input(
        ctx,
        &MergeInput::WalBacked {
            ino: wal_ino,
            lo,
            hi,
            offsets,
        },
    )?;
    let mut last: Option<&[u8]> = None;
    for (key, ..) in &rows {
        if let Some(prev) = last {
            if prev >= key.as_slice() {
                return Err("offset array is not in ascending key order".into());
            }
        }
        last = Some(key);
    }
    let results = build_outputs(ctx, rows, &[(out_ino, cap)])?;
    Ok(encode_results(&results))
}

/// Arguments for the merge: inputs (materialized tables or WAL-backed
/// descriptors), the tombstone rule, and the output files with their
/// byte capacities.
pub struct MergeArgs {
    pub inputs: Vec<MergeInputArg>,
    pub drop_tombstones: bool,
    pub outputs: Vec<(Ino, u64)>,
}

pub enum MergeInputArg {
    Materialized { ino: Ino, data_bytes: u64 },
    WalBacked { ino: Ino, lo: u64, hi: u64, offsets: Vec<u64> },
}

pub fn encode_merge_args(args: &MergeArgs) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(args.inputs.len() as u8);
    for input in &args.inputs {
        match input {
            MergeInputArg::Materialized { ino, data_bytes } => {
                out.push(0);
                put_u32(&mut out, ino.0);
                put_u64(&mut out, *data_bytes);
            }
            MergeInputArg::WalBacked { ino, lo, hi, offsets } => {
                out.push(1);
                put_u32(&mut out, ino.0);
                put_u64(&mut out, *lo);
                put_u64(&mut out, *hi);
                put_u32(&mut out, offsets.len() as u32);
                for off in offsets {
                    put_u64(&mut out, *off);
                }
            }
        }
    }
    out.push(args.drop_tombstones as u8);
    put_u32(&mut out, args.outputs.len() as u32);
    for (ino, cap) in &args.outputs {
        put_u32(&mut out, ino.0);
        put_u64(&mut out, *cap);
    }
    out
}

/// K-way merge of the inputs by (key ascending, seq descending): the
/// newest version of each key wins; tombstones are dropped only when
/// merging into the bottom level.
pub fn merge_stub(ctx: &LeaseIo, args: &[u8]) -> Result<Vec<u8>, String> {
    let mut r = Reader::new(args);
    let n_inputs = r.u8()? as usize;
    let mut inputs = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        let tag = r.u8()?;
        inputs.push(match tag {
            0 => MergeInput::Materialized {
                ino: Ino(r.u32()?),
                data_bytes: r.u64()?,
            },
            1 => {
                let ino = Ino(r.u32()?);
                let lo = r.u64()?;
                let hi = r.u64()?;
                let n = r.u32()? as usize;
                let mut offsets = Vec::with_capacity(n);
                for _ in 0..n {
                    offsets.push(r.u64()?);
                }
                MergeInput::WalBacked { ino, lo, hi, offsets }
            }
            other => return Err(format!("bad input tag {other}")),
        });
    }
    let drop_tombstones = r.u8()? != 0;
    let n_out = r.u32()? as usize;
    let mut outputs = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        outputs.push((Ino(r.u32()?), r.u64()?));
    }
    r.done()?;

    let mut tables: Vec<Vec<(Vec<u8>, u8, u64, Vec<u8>)>> = Vec::with_capacity(inputs.len());
    for input in &inputs {
        tables.push(load_input(ctx, input)?);
    }

    // K-way merge over the sorted per-input rows.
    let mut cursors = vec![0usize; tables.len()];
    let mut merged: Vec<(Vec<u8>, u8, u64, Vec<u8>)> = Vec::new();
    loop {
        let mut min_key: Option<&[u8]> = None;
        for (t, &c) in tables.iter().zip(&cursors) {
            if let Some(row) = t.get(c) {
                if min_key.map_or(true, |m| row.0.as_slice() < m) {
                    min_key = Some(&row.0);
                }
            }
        }
        let Some(min_key) = min_key else { break };
        let min_key = min_key.to_vec();
        // Take the newest version; consume every input holding this key.
        let mut winner: Option<(u8, u64, Vec<u8>)> = None;
        for (t, c) in tables.iter().zip(cursors.iter_mut()) {
            if let Some((key, op, seq, value)) = t.get(*c) {
                if key == &min_key {
                    if winner.as_ref().map_or(true, |w| *seq > w.1) {
                        winner = Some((*op, *seq, value.clone()));
                    }
                    *c += 1;
                }
            }
        }
        let (op, seq, value) = winner.unwrap();
        if op == OP_DELETE && drop_tombstones {
            continue;
        }
        merged.push((min_key, op, seq, value));
    }

    let results = build_outputs(ctx, merged, &outputs)?;
    Ok(encode_results(&results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use offload_core::extentfs::ExtentFs;
    use offload_core::volume::MemVolume;
    use offload_core::{BlockRange, VolumeGeometry};
    use std::sync::Arc;

    use crate::memtable::Op;
    use crate::sstable::{self, TableRef};
    use crate::wal::{WalFile, WalRecord, OP_PUT};

    fn test_fs() -> Arc<ExtentFs> {
        let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 8192).unwrap()));
        Arc::new(ExtentFs::mkfs(vol).unwrap())
    }

    /// Leased extents covering `[lo, hi)` bytes of a file.
    fn extents_for(
        fs: &ExtentFs,
        ino: Ino,
        lo: u64,
        hi: u64,
    ) -> Vec<(Ino, BlockRange)> {
        let bs = fs.geometry().block_size as u64;
        let mut out = Vec::new();
        for e in fs.file_extents(ino).unwrap() {
            let e_lo = e.logical;
            let e_hi = e.logical + e.len * bs;
            let lo = lo.max(e_lo);
            let hi = hi.min(e_hi);
            if lo >= hi {
                continue;
            }
            let first = e.phys + (lo - e_lo) / bs;
            let last = e.phys + (hi - e_lo).div_ceil(bs);
            out.push((ino, BlockRange::new(first, last - first)));
        }
        out
    }

    fn whole_file(fs: &ExtentFs, ino: Ino) -> Vec<(Ino, BlockRange)> {
        fs.file_extents(ino)
            .unwrap()
            .into_iter()
            .map(|e| (ino, BlockRange::new(e.phys, e.len)))
            .collect()
    }

    /// Runs `f` under a lease and completes it with the recorded
    /// watermarks, returning the task result.
    fn run_leased(
        fs: &Arc<ExtentFs>,
        read: &[(Ino, BlockRange)],
        write: &[(Ino, BlockRange)],
        f: impl FnOnce(&LeaseIo) -> Result<Vec<u8>, String>,
    ) -> Vec<u8> {
        let lease = fs.grant_lease(read, write, Vec::new()).unwrap();
        let id = lease.id;
        let ctx = LeaseIo::new(fs.volume(), fs.fs_uuid(), lease, &[], None);
        let result = f(&ctx).unwrap();
        ctx.finish();
        fs.complete_lease(id, &ctx.bytes_written()).unwrap();
        result
    }

    #[test]
    fn recycler_orders_scattered_records() {
        // Insertion order B,D,A,C,E at offsets 0,2K,4K,6K,8K; every frame
        // exactly 2 KiB so offsets land on that grid.
        let fs = test_fs();
        let mut wal = WalFile::open(Arc::clone(&fs), "wal").unwrap();
        let vlen = 2048 - 24; // frame = 23 + klen(1) + vlen
        let mut offsets = std::collections::HashMap::new();
        for (i, key) in ["B", "D", "A", "C", "E"].iter().enumerate() {
            let value = vec![key.as_bytes()[0]; vlen];
            let off = wal.append(&WalRecord::put(i as u64 + 1, key.as_bytes(), &value));
            offsets.insert(*key, off);
        }
        wal.sync().unwrap();
        assert_eq!(offsets["B"], 0);
        assert_eq!(offsets["D"], 2048);
        assert_eq!(offsets["A"], 4096);
        assert_eq!(offsets["C"], 6144);
        assert_eq!(offsets["E"], 8192);

        let array = vec![4096, 0, 6144, 2048, 8192];
        let out = fs.create_file("sst-1").unwrap();
        let cap = 16 * 1024;
        fs.preallocate(out, cap).unwrap();

        let args = encode_recycle_args(wal.ino(), 0, 10240, &array, out, cap);
        let read = extents_for(&fs, wal.ino(), 0, 10240);
        let write = whole_file(&fs, out);
        let result = run_leased(&fs, &read, &write, |ctx| log_recycle_stub(ctx, &args));

        let metas = decode_results(&result).unwrap();
        assert_eq!(metas.len(), 1);
        let (ino, info) = &metas[0];
        assert_eq!(*ino, out);
        assert_eq!(info.entry_count, 5);
        assert_eq!(info.smallest, b"A");
        assert_eq!(info.largest, b"E");

        let rows = sstable::load_all(
            &fs,
            TableRef {
                ino: out,
                data_bytes: info.data_bytes,
                entry_count: info.entry_count,
            },
        )
        .unwrap();
        let keys: Vec<_> = rows.iter().map(|(k, ..)| k.clone()).collect();
        assert_eq!(keys, vec![b"A".to_vec(), b"B".to_vec(), b"C".to_vec(), b"D".to_vec(), b"E".to_vec()]);
        for (key, _seq, op) in rows {
            assert_eq!(op, Op::Put(vec![key[0]; vlen]));
        }
    }

    #[test]
    fn recycler_rejects_corrupt_record() {
        let fs = test_fs();
        let mut wal = WalFile::open(Arc::clone(&fs), "wal").unwrap();
        let off = wal.append(&WalRecord::put(1, b"k", b"value"));
        wal.sync().unwrap();
        let mut byte = fs.read(wal.ino(), off + 10, 1).unwrap();
        byte[0] ^= 0x55;
        fs.write(wal.ino(), off + 10, &byte).unwrap();

        let out = fs.create_file("sst-1").unwrap();
        fs.preallocate(out, 4096).unwrap();
        let args = encode_recycle_args(wal.ino(), 0, wal.synced_len(), &[off], out, 4096);
        let read = extents_for(&fs, wal.ino(), 0, wal.synced_len());
        let write = whole_file(&fs, out);

        let lease = fs.grant_lease(&read, &write, Vec::new()).unwrap();
        let ctx = LeaseIo::new(fs.volume(), fs.fs_uuid(), lease.clone(), &[], None);
        let err = log_recycle_stub(&ctx, &args).unwrap_err();
        assert!(err.contains("crc"), "unexpected error: {err}");
        ctx.finish();
        fs.abort_lease(lease.id).unwrap();
    }

    #[test]
    fn merge_newest_wins_and_bottom_drops_tombstones() {
        let fs = test_fs();
        // Input A (older): a=1, b=2, c=3.
        let mut b1 = SstBuilder::new(1 << 20);
        b1.add(b"a", OP_PUT, 1, b"old-a");
        b1.add(b"b", OP_PUT, 2, b"old-b");
        b1.add(b"c", OP_PUT, 3, b"old-c");
        let (img1, info1) = b1.finish();
        let in1 = sstable::write_image(&fs, "sst-10", &img1).unwrap();
        // Input B (newer): a=10 overwrite, b tombstone, d new.
        let mut b2 = SstBuilder::new(1 << 20);
        b2.add(b"a", OP_PUT, 10, b"new-a");
        b2.add(b"b", OP_DELETE, 11, b"");
        b2.add(b"d", OP_PUT, 12, b"new-d");
        let (img2, info2) = b2.finish();
        let in2 = sstable::write_image(&fs, "sst-11", &img2).unwrap();

        let out = fs.create_file("sst-12").unwrap();
        let cap = 64 * 1024;
        fs.preallocate(out, cap).unwrap();

        let args = encode_merge_args(&MergeArgs {
            inputs: vec![
                MergeInputArg::Materialized {
                    ino: in1,
                    data_bytes: info1.data_bytes,
                },
                MergeInputArg::Materialized {
                    ino: in2,
                    data_bytes: info2.data_bytes,
                },
            ],
            drop_tombstones: true,
            outputs: vec![(out, cap)],
        });
        let mut read = whole_file(&fs, in1);
        read.extend(whole_file(&fs, in2));
        let write = whole_file(&fs, out);
        let result = run_leased(&fs, &read, &write, |ctx| merge_stub(ctx, &args));

        let metas = decode_results(&result).unwrap();
        assert_eq!(metas.len(), 1);
        let info = &metas[0].1;
        let rows = sstable::load_all(
            &fs,
            TableRef {
                ino: out,
                data_bytes: info.data_bytes,
                entry_count: info.entry_count,
            },
        )
        .unwrap();
        let flat: Vec<(Vec<u8>, Op)> = rows
            .into_iter()
            .map(|(k, _seq, op)| (k, op))
            .collect();
        assert_eq!(
            flat,
            vec![
                (b"a".to_vec(), Op::Put(b"new-a".to_vec())),
                (b"c".to_vec(), Op::Put(b"old-c".to_vec())),
                (b"d".to_vec(), Op::Put(b"new-d".to_vec())),
            ],
            "b's tombstone erased it; newest a wins"
        );
    }

    #[test]
    fn merge_keeps_tombstones_above_bottom() {
        let fs = test_fs();
        let mut b1 = SstBuilder::new(1 << 20);
        b1.add(b"x", OP_DELETE, 5, b"");
        let (img1, info1) = b1.finish();
        let in1 = sstable::write_image(&fs, "sst-20", &img1).unwrap();

        let out = fs.create_file("sst-21").unwrap();
        fs.preallocate(out, 8192).unwrap();
        let args = encode_merge_args(&MergeArgs {
            inputs: vec![MergeInputArg::Materialized {
                ino: in1,
                data_bytes: info1.data_bytes,
            }],
            drop_tombstones: false,
            outputs: vec![(out, 8192)],
        });
        let read = whole_file(&fs, in1);
        let write = whole_file(&fs, out);
        let result = run_leased(&fs, &read, &write, |ctx| merge_stub(ctx, &args));
        let metas = decode_results(&result).unwrap();
        let rows = sstable::load_all(
            &fs,
            TableRef {
                ino: out,
                data_bytes: metas[0].1.data_bytes,
                entry_count: metas[0].1.entry_count,
            },
        )
        .unwrap();
        assert_eq!(rows, vec![(b"x".to_vec(), 5, Op::Delete)]);
    }

    #[test]
    fn merge_splits_outputs_at_capacity() {
        let fs = test_fs();
        let mut b1 = SstBuilder::new(1 << 20);
        for i in 0..40u32 {
            b1.add(format!("k{i:03}").as_bytes(), OP_PUT, i as u64 + 1, &[7u8; 100]);
        }
        let (img1, info1) = b1.finish();
        let in1 = sstable::write_image(&fs, "sst-30", &img1).unwrap();

        // Capacity fits roughly half the rows per output.
        let cap = 2600u64;
        let out1 = fs.create_file("sst-31").unwrap();
        let out2 = fs.create_file("sst-32").unwrap();
        let out3 = fs.create_file("sst-33").unwrap();
        for out in [out1, out2, out3] {
            fs.preallocate(out, cap).unwrap();
        }
        let args = encode_merge_args(&MergeArgs {
            inputs: vec![MergeInputArg::Materialized {
                ino: in1,
                data_bytes: info1.data_bytes,
            }],
            drop_tombstones: true,
            outputs: vec![(out1, cap), (out2, cap), (out3, cap)],
        });
        let read = whole_file(&fs, in1);
        let mut write = whole_file(&fs, out1);
        write.extend(whole_file(&fs, out2));
        write.extend(whole_file(&fs, out3));
        let result = run_leased(&fs, &read, &write, |ctx| merge_stub(ctx, &args));
        let metas = decode_results(&result).unwrap();
        assert!(metas.len() >= 2, "forced a split, got {}", metas.len());
        // Outputs partition the key space in order, no overlap, no loss.
        let mut all = Vec::new();
        for (ino, info) in &metas {
            assert!(info.file_bytes <= cap);
            let rows = sstable::load_all(
                &fs,
                TableRef {
                    ino: *ino,
                    data_bytes: info.data_bytes,
                    entry_count: info.entry_count,
                },
            )
            .unwrap();
            all.extend(rows.into_iter().map(|(k, ..)| k));
        }
        let expect: Vec<Vec<u8>> = (0..40u32)
            .map(|i| format!("k{i:03}").into_bytes())
            .collect();
        assert_eq!(all, expect);
    }
}
