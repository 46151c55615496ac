//! Link-byte accounting wrapper for local volumes.
//!
//! Wraps any `BlockStore` and charges a shared `LinkStats` exactly what the
//! remote transport would have carried for the same operations: a request
//! frame out, a response frame back. A locally backed run therefore reports
//! the same tx/rx byte counters as a remote run of the same block trace,
//! which is what lets experiments flip between the two backends without
//! recalibrating their accounting.

use std::sync::Arc;

use super::{BlockAddr, BlockStore, IoCounts, VolumeError, VolumeGeometry};
use crate::wire::{
    io_read_frame_len, io_read_resp_frame_len, io_write_ack_frame_len, io_write_frame_len,
    LinkProfile, LinkStats,
};

pub struct MeteredVolume {
    inner: Arc<dyn BlockStore>,
    stats: Arc<LinkStats>,
    profile: LinkProfile,
}

impl MeteredVolume {
    pub fn new(inner: Arc<dyn BlockStore>, stats: Arc<LinkStats>) -> Self {
        Self {
            inner,
            stats,
            profile: LinkProfile::default(),
        }
    }

    pub fn with_profile(
        inner: Arc<dyn BlockStore>,
        stats: Arc<LinkStats>,
        profile: LinkProfile,
    ) -> Self {
        Self {
            inner,
            stats,
            profile,
        }
    }

    pub fn stats(&self) -> Arc<LinkStats> {
        Arc::clone(&self.stats)
    }

    fn pace(&self, wire_bytes: u64) {
        let d = self.profile.delay_for(wire_bytes);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

impl BlockStore for MeteredVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.inner.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        let data = self.inner.read_blocks(addr, count)?;
        let tx = io_read_frame_len();
        let rx = io_read_resp_frame_len(data.len());
        self.stats.add_tx(tx);
        self.stats.add_rx(rx);
        self.pace(tx + rx);
        Ok(data)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        self.inner.write_blocks(addr, data)?;
        let tx = io_write_frame_len(data.len());
        let rx = io_write_ack_frame_len();
        self.stats.add_tx(tx);
        self.stats.add_rx(rx);
        self.pace(tx + rx);
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        self.inner.io_counts()
    }
}
