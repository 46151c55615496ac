//! The preprocessing transform: a deterministic, content-pure pipeline.
//!
//! Three stages model a decode/resize/flip preprocessing step:
//!
//! 1. **Downsample** — keep every `stride`-th byte of the input (the
//!    resize analog).
//! 2. **Flip** — reverse each fixed-size window of the downsampled
//!    stream in place; a short tail window is reversed too.
//! 3. **Digest** — rolling checksums over the flipped stream, packed
//!    into a fixed-size digest.
//!
//! The output is a function of the input bytes and the transform id
//! alone — never of where the pipeline runs. That purity is what makes
//! placement across execution sites transparent: any split of a batch
//! produces the same digests.

/// Size of the digest emitted by [`transform`].
pub const DIGEST_LEN: usize = 16;

/// Selects the pipeline parameters. The id maps deterministically onto
/// a stride and a window length, so distinct ids generally produce
/// distinct digests for the same content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransformId(pub u32);

impl TransformId {
    /// Downsample stride, in the range 2..=8.
    pub fn stride(&self) -> usize {
        2 + (self.0 % 7) as usize
    }

    /// Flip window length: 16, 32, or 64 bytes.
    pub fn window(&self) -> usize {
        16 << (self.0 % 3)
    }
}

/// Applies the pipeline to `content`. Returns the digest and the length
/// of the transformed stream (the output a real preprocessor would hand
/// to the training loop).
pub fn transform(content: &[u8], id: TransformId) -> ([u8; DIGEST_LEN], u64) {
    let mut stream: Vec<u8> = content.iter().copied().step_by(id.stride()).collect();
    for chunk in stream.chunks_mut(id.window()) {
        chunk.reverse();
    }
    (digest_stream(&stream), stream.len() as u64)
}

/// Rolling digest over a byte stream: FNV-1a (8 bytes) || Adler-32
/// (4 bytes) || CRC-32 (4 bytes).
fn digest_stream(stream: &[u8]) -> [u8; DIGEST_LEN] {
    let mut fnv: u64 = 0xcbf2_9ce4_8422_2325;
    let mut a: u32 = 1;
    let mut b: u32 = 0;
    for &byte in stream {
        fnv ^= byte as u64;
        fnv = fnv.wrapping_mul(0x100_0000_01b3);
        a = (a + byte as u32) % 65_521;
        b = (b + a) % 65_521;
    }
    let mut crc = crc32fast::Hasher::new();
    crc.update(stream);

    let mut digest = [0u8; DIGEST_LEN];
    digest[..8].copy_from_slice(&fnv.to_le_bytes());
    digest[8..12].copy_from_slice(&((b << 16) | a).to_le_bytes());
    digest[12..].copy_from_slice(&crc.finalize().to_le_bytes());
    digest
}
