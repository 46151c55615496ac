//! Local volume backends: an in-memory buffer and a regular file.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{
    check_aligned, check_range, BlockAddr, BlockStore, IoCounters, IoCounts, VolumeError,
    VolumeGeometry,
};

/// Volume held entirely in memory. Reads of never-written blocks return
/// zeroes, like a freshly zeroed device.
pub struct MemVolume {
    geom: VolumeGeometry,
    data: Mutex<Vec<u8>>,
    counters: IoCounters,
}

impl MemVolume {
    pub fn new(geom: VolumeGeometry) -> Self {
        let cap = geom.capacity_bytes();
        assert!(
            cap <= usize::MAX as u64,
            "in-memory volume too large for address space"
        );
        Self::from_bytes(geom, vec![0u8; cap as usize])
    }

    /// Builds a volume over a pre-populated image, e.g. a snapshot taken
    /// from another run.
    pub fn from_bytes(geom: VolumeGeometry, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len() as u64,
            geom.capacity_bytes(),
            "image length must match geometry capacity"
        );
        Self {
            geom,
            data: Mutex::new(data),
            counters: IoCounters::default(),
        }
    }

    /// Copies out the full device image.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        self.data.lock().unwrap().clone()
    }
}

impl BlockStore for MemVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.geom
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        check_range(&self.geom, addr, count)?;
        let bs = self.geom.block_size as u64;
        let off = (addr.0 * bs) as usize;
        let len = (count * bs) as usize;
        let data = self.data.lock().unwrap();
        let out = data[off..off + len].to_vec();
        self.counters.record_read(count);
        Ok(out)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        let count = check_aligned(&self.geom, data)?;
        check_range(&self.geom, addr, count)?;
        let off = (addr.0 * self.geom.block_size as u64) as usize;
        let mut buf = self.data.lock().unwrap();
        buf[off..off + data.len()].copy_from_slice(data);
        self.counters.record_write(count);
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        self.counters.snapshot()
    }
}

/// Volume backed by a regular file, sized to the full capacity at creation.
/// The file is extended sparsely, so large volumes do not eagerly consume
/// disk space.
pub struct FileVolume {
    geom: VolumeGeometry,
    file: File,
    path: PathBuf,
    counters: IoCounters,
}

impl FileVolume {
    /// Creates (or truncates) `path` and sizes it to the geometry capacity.
    pub fn create(path: &Path, geom: VolumeGeometry) -> Result<Self, VolumeError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(geom.capacity_bytes())?;
        Ok(Self {
            geom,
            file,
            path: path.to_path_buf(),
            counters: IoCounters::default(),
        })
    }

    /// Opens an existing volume file. The file length must be an exact
    /// multiple of `block_size` and large enough for at least one block.
    pub fn open(path: &Path, block_size: u32) -> Result<Self, VolumeError> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        if len == 0 || len % block_size as u64 != 0 {
            return Err(VolumeError::Backing(format!(
                "file length {} is not a positive multiple of block size {}",
                len, block_size
            )));
        }
        let geom = VolumeGeometry::new(block_size, len / block_size as u64)?;
        Ok(Self {
            geom,
            file,
            path: path.to_path_buf(),
            counters: IoCounters::default(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn sync(&self) -> Result<(), VolumeError> {
        self.file.sync_data()?;
        Ok(())
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], off: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, off)
}

#[cfg(unix)]
fn write_all_at(file: &File, buf: &[u8], off: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.write_all_at(buf, off)
}

impl BlockStore for FileVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.geom
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        check_range(&self.geom, addr, count)?;
        let bs = self.geom.block_size as u64;
        let mut buf = vec![0u8; (count * bs) as usize];
        read_exact_at(&self.file, &mut buf, addr.0 * bs)?;
        self.counters.record_read(count);
        Ok(buf)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        let count = check_aligned(&self.geom, data)?;
        check_range(&self.geom, addr, count)?;
        write_all_at(&self.file, data, addr.0 * self.geom.block_size as u64)?;
        self.counters.record_write(count);
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        self.counters.snapshot()
    }
}

/// How a locally served volume is stored.
#[derive(Debug, Clone)]
pub enum Backing {
    Memory,
    File(PathBuf),
}

/// Creates a fresh volume on the given backing.
pub fn create_volume(
    backing: &Backing,
    geom: VolumeGeometry,
) -> Result<super::VolumeHandle, VolumeError> {
    match backing {
        Backing::Memory => Ok(std::sync::Arc::new(MemVolume::new(geom))),
        Backing::File(path) => Ok(std::sync::Arc::new(FileVolume::create(path, geom)?)),
    }
}
