//! Payload codecs for the offload-protocol frames layered on the framed
//! transport: lease descriptors, offload submissions and results, token
//! traffic, and cache invalidation.
//!
//! All integers are little-endian. Strings are `[u16 len][bytes]`, byte
//! blobs are `[u32 len][bytes]`.

use thiserror::Error;

use crate::extentfs::{Ino, Lease, LeaseExtent, LeaseId};
use crate::volume::BlockRange;

#[derive(Debug, Error)]
#[error("malformed {0} payload")]
pub struct ProtoError(pub &'static str);

/// One offload submission, as carried by an OFFLOAD_SUBMIT frame.
#[derive(Debug, Clone)]
pub struct OffloadRequest {
    pub volume_id: u64,
    pub lease: Lease,
    pub stub_name: String,
    /// Fresher per-file mtimes than the lease may carry; merged on the
    /// target.
    pub mtime_hints: Vec<(Ino, u64)>,
    pub args: Vec<u8>,
    /// Identity used for token accounting; filled by the submitting client.
    pub initiator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Policy,
    Overload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Rejected(RejectReason),
    Failed(String),
}

/// The reply to a submission, as carried by an OFFLOAD_RESULT frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadResponse {
    pub outcome: Outcome,
    /// Bytes produced per write-set extent, in lease order; empty unless
    /// completed.
    pub bytes_written: Vec<u64>,
    /// Stub result bytes (completed) or empty.
    pub result: Vec<u8>,
}

impl OffloadResponse {
    pub fn completed(result: Vec<u8>, bytes_written: Vec<u64>) -> Self {
        Self {
            outcome: Outcome::Completed,
            bytes_written,
            result,
        }
    }

    pub fn rejected(reason: RejectReason) -> Self {
        Self {
            outcome: Outcome::Rejected(reason),
            bytes_written: Vec::new(),
            result: Vec::new(),
        }
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Failed(msg.into()),
            bytes_written: Vec::new(),
            result: Vec::new(),
        }
    }
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u16(buf, s.len() as u16);
    buf.extend_from_slice(s.as_bytes());
}

fn put_blob(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtoError(self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, ProtoError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ProtoError(self.what))
    }

    fn blob(&mut self) -> Result<Vec<u8>, ProtoError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn done(&self) -> Result<(), ProtoError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(ProtoError(self.what))
        }
    }
}

fn put_lease_extent(buf: &mut Vec<u8>, e: &LeaseExtent) {
    put_u32(buf, e.ino.0);
    put_u64(buf, e.logical);
    put_u64(buf, e.range.start);
    put_u64(buf, e.range.len);
}

fn read_lease_extent(r: &mut Reader) -> Result<LeaseExtent, ProtoError> {
    Ok(LeaseExtent {
        ino: Ino(r.u32()?),
        logical: r.u64()?,
        range: BlockRange::new(r.u64()?, r.u64()?),
    })
}

fn put_extent_list(buf: &mut Vec<u8>, v: &[LeaseExtent]) {
    put_u16(buf, v.len() as u16);
    for e in v {
        put_lease_extent(buf, e);
    }
}

fn read_extent_list(r: &mut Reader) -> Result<Vec<LeaseExtent>, ProtoError> {
    let n = r.u16()? as usize;
    (0..n).map(|_| read_lease_extent(r)).collect()
}

fn put_hints(buf: &mut Vec<u8>, hints: &[(Ino, u64)]) {
    put_u16(buf, hints.len() as u16);
    for (ino, m) in hints {
        put_u32(buf, ino.0);
        put_u64(buf, *m);
    }
}

fn read_hints(r: &mut Reader) -> Result<Vec<(Ino, u64)>, ProtoError> {
    let n = r.u16()? as usize;
    (0..n).map(|_| Ok((Ino(r.u32()?), r.u64()?))).collect()
}

/// Lease descriptor: `[u64 id][read extents][write extents]`. The hints
/// travel separately in the submit payload; the rebuilt lease is Active.
fn put_lease(buf: &mut Vec<u8>, lease: &Lease) {
    put_u64(buf, lease.id.0);
    put_extent_list(buf, &lease.read_set);
    put_extent_list(buf, &lease.write_set);
}

fn read_lease(r: &mut Reader) -> Result<Lease, ProtoError> {
    let id = LeaseId(r.u64()?);
    let read_set = read_extent_list(r)?;
    let write_set = read_extent_list(r)?;
    Ok(Lease::new(id, read_set, write_set, Vec::new()))
}

/// OFFLOAD_SUBMIT payload:
/// `[u64 volume_id][lease][stub name][hints][args blob][initiator]`.
pub fn encode_offload_submit(req: &OffloadRequest) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + req.args.len());
    put_u64(&mut buf, req.volume_id);
    put_lease(&mut buf, &req.lease);
    put_str(&mut buf, &req.stub_name);
    put_hints(&mut buf, &req.mtime_hints);
    put_blob(&mut buf, &req.args);
    put_str(&mut buf, &req.initiator);
    buf
}

pub fn decode_offload_submit(payload: &[u8]) -> Result<OffloadRequest, ProtoError> {
    let mut r = Reader::new(payload, "OFFLOAD_SUBMIT");
    let volume_id = r.u64()?;
    let lease = read_lease(&mut r)?;
    let stub_name = r.str()?;
    let mtime_hints = read_hints(&mut r)?;
    let args = r.blob()?;
    let initiator = r.str()?;
    r.done()?;
    Ok(OffloadRequest {
        volume_id,
        lease,
        stub_name,
        mtime_hints,
        args,
        initiator,
    })
}

const OUTCOME_COMPLETED: u8 = 0;
const OUTCOME_REJECTED: u8 = 1;
const OUTCOME_FAILED: u8 = 2;
const REASON_NONE: u8 = 0;
const REASON_POLICY: u8 = 1;
const REASON_OVERLOAD: u8 = 2;

/// OFFLOAD_RESULT payload:
/// `[u8 outcome][u8 reason][u16 n][u64 bytes_written...][result blob]`.
/// For failures the result blob carries the error text.
pub fn encode_offload_result(resp: &OffloadResponse) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + resp.result.len());
    let (outcome, reason, text): (u8, u8, Option<&str>) = match &resp.outcome {
        Outcome::Completed => (OUTCOME_COMPLETED, REASON_NONE, None),
        Outcome::Rejected(RejectReason::Policy) => (OUTCOME_REJECTED, REASON_POLICY, None),
        Outcome::Rejected(RejectReason::Overload) => (OUTCOME_REJECTED, REASON_OVERLOAD, None),
        Outcome::Failed(msg) => (OUTCOME_FAILED, REASON_NONE, Some(msg)),
    };
    buf.push(outcome);
    buf.push(reason);
    put_u16(&mut buf, resp.bytes_written.len() as u16);
    for b in &resp.bytes_written {
        put_u64(&mut buf, *b);
    }
    match text {
        Some(t) => put_blob(&mut buf, t.as_bytes()),
        None => put_blob(&mut buf, &resp.result),
    }
    buf
}

pub fn decode_offload_result(payload: &[u8]) -> Result<OffloadResponse, ProtoError> {
    let mut r = Reader::new(payload, "OFFLOAD_RESULT");
    let outcome = r.u8()?;
    let reason = r.u8()?;
    let n = r.u16()? as usize;
    let bytes_written = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    let blob = r.blob()?;
    r.done()?;
    let outcome = match (outcome, reason) {
        (OUTCOME_COMPLETED, _) => Outcome::Completed,
        (OUTCOME_REJECTED, REASON_OVERLOAD) => Outcome::Rejected(RejectReason::Overload),
        (OUTCOME_REJECTED, _) => Outcome::Rejected(RejectReason::Policy),
        (OUTCOME_FAILED, _) => {
            Outcome::Failed(String::from_utf8_lossy(&blob).into_owned())
        }
        _ => return Err(ProtoError("OFFLOAD_RESULT")),
    };
    let result = if matches!(outcome, Outcome::Completed) {
        blob
    } else {
        Vec::new()
    };
    Ok(OffloadResponse {
        outcome,
        bytes_written,
        result,
    })
}

/// TOKEN_ACQUIRE payload: `[initiator string]`.
pub fn encode_token_acquire(initiator: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    put_str(&mut buf, initiator);
    buf
}

pub fn decode_token_acquire(payload: &[u8]) -> Result<String, ProtoError> {
    let mut r = Reader::new(payload, "TOKEN_ACQUIRE");
    let s = r.str()?;
    r.done()?;
    Ok(s)
}

/// TOKEN_GRANT payload: `[u64 token_id][u64 ttl_ms]`; token id 0 means no
/// token is available.
pub fn encode_token_grant(token_id: u64, ttl_ms: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16);
    put_u64(&mut buf, token_id);
    put_u64(&mut buf, ttl_ms);
    buf
}

pub fn decode_token_grant(payload: &[u8]) -> Result<(u64, u64), ProtoError> {
    let mut r = Reader::new(payload, "TOKEN_GRANT");
    let id = r.u64()?;
    let ttl = r.u64()?;
    r.done()?;
    Ok((id, ttl))
}

/// TOKEN_RETURN payload: `[u64 token_id]`.
pub fn encode_token_return(token_id: u64) -> Vec<u8> {
    token_id.to_le_bytes().to_vec()
}

pub fn decode_token_return(payload: &[u8]) -> Result<u64, ProtoError> {
    let mut r = Reader::new(payload, "TOKEN_RETURN");
    let id = r.u64()?;
    r.done()?;
    Ok(id)
}

/// CACHE_INVAL payload: `[u64 volume_id][u32 count][u64 addr...]`.
pub fn encode_cache_inval(volume_id: u64, addrs: &[u64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + addrs.len() * 8);
    put_u64(&mut buf, volume_id);
    put_u32(&mut buf, addrs.len() as u32);
    for a in addrs {
        put_u64(&mut buf, *a);
    }
    buf
}

pub fn decode_cache_inval(payload: &[u8]) -> Result<(u64, Vec<u64>), ProtoError> {
    let mut r = Reader::new(payload, "CACHE_INVAL");
    let vol = r.u64()?;
    let n = r.u32()? as usize;
    let addrs = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    r.done()?;
    Ok((vol, addrs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_lease() -> Lease {
        Lease::new(
            LeaseId(42),
            vec![LeaseExtent {
                ino: Ino(1),
                logical: 4096,
                range: BlockRange::new(4, 2),
            }],
            vec![LeaseExtent {
                ino: Ino(2),
                logical: 0,
                range: BlockRange::new(8, 2),
            }],
            vec![],
        )
    }

    #[test]
    fn submit_roundtrip() {
        let req = OffloadRequest {
            volume_id: 77,
            lease: sample_lease(),
            stub_name: "compact_l0".into(),
            mtime_hints: vec![(Ino(1), 9)],
            args: vec![1, 2, 3],
            initiator: "node-a".into(),
        };
        let got = decode_offload_submit(&encode_offload_submit(&req)).unwrap();
        assert_eq!(got.volume_id, 77);
        assert_eq!(got.lease.id, LeaseId(42));
        assert_eq!(got.lease.read_set, req.lease.read_set);
        assert_eq!(got.lease.write_set, req.lease.write_set);
        assert!(got.lease.is_active());
        assert_eq!(got.stub_name, "compact_l0");
        assert_eq!(got.mtime_hints, vec![(Ino(1), 9)]);
        assert_eq!(got.args, vec![1, 2, 3]);
        assert_eq!(got.initiator, "node-a");
    }

    #[test]
    fn result_roundtrips() {
        for resp in [
            OffloadResponse::completed(b"ok".to_vec(), vec![512, 0]),
            OffloadResponse::rejected(RejectReason::Policy),
            OffloadResponse::rejected(RejectReason::Overload),
            OffloadResponse::failed("stub blew up"),
        ] {
            let got = decode_offload_result(&encode_offload_result(&resp)).unwrap();
            assert_eq!(got, resp);
        }
    }

    #[test]
    fn token_and_inval_roundtrips() {
        assert_eq!(
            decode_token_acquire(&encode_token_acquire("init-3")).unwrap(),
            "init-3"
        );
        assert_eq!(
            decode_token_grant(&encode_token_grant(5, 1000)).unwrap(),
            (5, 1000)
        );
        assert_eq!(decode_token_return(&encode_token_return(5)).unwrap(), 5);
        assert_eq!(
            decode_cache_inval(&encode_cache_inval(9, &[1, 2, 3])).unwrap(),
            (9, vec![1, 2, 3])
        );
    }

    #[test]
    fn truncated_payloads_rejected() {
        let req = OffloadRequest {
            volume_id: 1,
            lease: sample_lease(),
            stub_name: "s".into(),
            mtime_hints: vec![],
            args: vec![],
            initiator: "i".into(),
        };
        let enc = encode_offload_submit(&req);
        for cut in [0, 5, enc.len() / 2, enc.len() - 1] {
            assert!(decode_offload_submit(&enc[..cut]).is_err());
        }
        // Trailing garbage rejected too.
        let mut padded = enc.clone();
        padded.push(0);
        assert!(decode_offload_submit(&padded).is_err());
    }
}
