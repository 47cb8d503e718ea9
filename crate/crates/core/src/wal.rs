//! Write-ahead log of protocol-critical state.
//!
//! Only the latest record matters: the application keeps the full history of
//! delivered decisions, so the log just has to stop a restarted node from
//! voting against something it voted for before the crash.
//!
//! [`FileWal`] keeps two slot files and a pointer file inside one directory.
//! An append writes the slot not currently pointed at, syncs it, then rewrites
//! the pointer. Every file holds `len (u32 BE) ‖ payload ‖ crc32 (u32 BE)`; a
//! torn or corrupted write fails its checksum and the other slot is used.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::message::PreparedCertificate;
use crate::types::{Digest, Seq, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WalPhase {
    /// A Prepare for `digest` is about to be sent.
    PrePrepared,
    /// A Commit is about to be sent; the certificate is attached.
    Prepared,
    /// The node adopted `view`.
    ViewAdopted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalRecord {
    pub view: View,
    pub sequence: Seq,
    pub phase: WalPhase,
    pub digest: Option<Digest>,
    pub prepared: Option<PreparedCertificate>,
}

#[derive(Debug, thiserror::Error)]
pub enum WalError {
    #[error("wal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wal storage unavailable")]
    Unavailable,
}

pub trait Wal {
    /// Durable before returning.
    fn append(&mut self, record: &WalRecord) -> Result<(), WalError>;
    fn read_latest(&self) -> Result<Option<WalRecord>, WalError>;
}

impl<W: Wal + ?Sized> Wal for Box<W> {
    fn append(&mut self, record: &WalRecord) -> Result<(), WalError> {
        (**self).append(record)
    }

    fn read_latest(&self) -> Result<Option<WalRecord>, WalError> {
        (**self).read_latest()
    }
}

/// In-memory log whose contents survive dropping the handle, for simulated
/// crash/restart. Cloned handles share the same storage.
#[derive(Debug, Clone, Default)]
pub struct MemWal {
    inner: Arc<Mutex<MemWalState>>,
}

#[derive(Debug, Default)]
struct MemWalState {
    latest: Option<WalRecord>,
    appends: u64,
    fail_after: Option<u64>,
}

impl MemWal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn appends(&self) -> u64 {
        self.inner.lock().expect("wal lock").appends
    }

    /// Makes every append after the first `n` fail, as a dead disk would.
    pub fn fail_after(&self, n: u64) {
        self.inner.lock().expect("wal lock").fail_after = Some(n);
    }
}

impl Wal for MemWal {
    fn append(&mut self, record: &WalRecord) -> Result<(), WalError> {
        let mut state = self.inner.lock().expect("wal lock");
        if state.fail_after.is_some_and(|n| state.appends >= n) {
            return Err(WalError::Unavailable);
        }
        state.latest = Some(record.clone());
        state.appends += 1;
        Ok(())
    }

    fn read_latest(&self) -> Result<Option<WalRecord>, WalError> {
        Ok(self.inner.lock().expect("wal lock").latest.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct SlotBody {
    counter: u64,
    record: WalRecord,
}

#[derive(Serialize, Deserialize)]
struct Pointer {
    slot: u8,
    counter: u64,
}

pub const SLOT_FILES: [&str; 2] = ["slot-0.wal", "slot-1.wal"];
pub const POINTER_FILE: &str = "pointer.wal";

#[derive(Debug)]
pub struct FileWal {
    dir: PathBuf,
    counter: u64,
    current_slot: Option<u8>,
}

fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out
}

fn unframe(bytes: &[u8]) -> Option<&[u8]> {
    let len = u32::from_be_bytes(bytes.get(..4)?.try_into().ok()?) as usize;
    let payload = bytes.get(4..4 + len)?;
    let crc = u32::from_be_bytes(bytes.get(4 + len..8 + len)?.try_into().ok()?);
    (crc32fast::hash(payload) == crc && bytes.len() == 8 + len).then_some(payload)
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)?;
    file.write_all(bytes)?;
    file.sync_all()
}

impl FileWal {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, WalError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut wal = Self {
            dir,
            counter: 0,
            current_slot: None,
        };
        if let Some((slot, body)) = wal.load()? {
            wal.counter = body.counter;
            wal.current_slot = Some(slot);
        }
        Ok(wal)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_slot(&self, slot: u8) -> Option<SlotBody> {
        let bytes = fs::read(self.dir.join(SLOT_FILES[slot as usize])).ok()?;
        codec::decode(unframe(&bytes)?).ok()
    }

    fn load(&self) -> Result<Option<(u8, SlotBody)>, WalError> {
        let pointer = fs::read(self.dir.join(POINTER_FILE))
            .ok()
            .and_then(|b| unframe(&b).and_then(|p| codec::decode::<Pointer>(p).ok()));
        if let Some(p) = &pointer {
            if let Some(body) = self.read_slot(p.slot).filter(|b| b.counter == p.counter) {
                return Ok(Some((p.slot, body)));
            }
        }
        // Pointer missing, torn, or ahead of a torn slot: fall back to the
        // newest slot that passes its checksum.
        let best = (0u8..2)
            .filter_map(|s| self.read_slot(s).map(|b| (s, b)))
            .filter(|(_, b)| pointer.as_ref().map_or(true, |p| b.counter <= p.counter))
            .max_by_key(|(_, b)| b.counter);
        if best.is_none() && self.dir.join(POINTER_FILE).exists() {
            tracing::warn!(dir = %self.dir.display(), "wal corrupted beyond recovery, starting fresh");
        }
        Ok(best)
    }
}

impl Wal for FileWal {
    fn append(&mut self, record: &WalRecord) -> Result<(), WalError> {
        let slot = match self.current_slot {
            Some(s) => 1 - s,
            None => 0,
        };
        let counter = self.counter + 1;
        let body = codec::encode(&SlotBody {
            counter,
            record: record.clone(),
        });
        write_synced(&self.dir.join(SLOT_FILES[slot as usize]), &frame(&body))?;
        let pointer = codec::encode(&Pointer { slot, counter });
        write_synced(&self.dir.join(POINTER_FILE), &frame(&pointer))?;
        File::open(&self.dir)?.sync_all()?;
        self.counter = counter;
        self.current_slot = Some(slot);
        Ok(())
    }

    fn read_latest(&self) -> Result<Option<WalRecord>, WalError> {
        Ok(self.load()?.map(|(_, b)| b.record))
    }
}
