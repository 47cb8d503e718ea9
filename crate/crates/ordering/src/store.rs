//! Hash-chained block store.
//!
//! The block file holds length-prefixed canonical block encodings (header,
//! payload and proposal metadata) and is byte-identical on every correct node.
//! Commit signature sets differ between nodes (each keeps the quorum it
//! happened to collect), so they live in a side index next to each block's
//! offset. Frames are `len (u32 BE) ‖ body ‖ crc32 (u32 BE)`; a torn tail is
//! cut off on open.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bftorder::{codec, Digest, Signature};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::block::{Block, BlockError};

pub const BLOCK_FILE: &str = "blocks.bin";
pub const INDEX_FILE: &str = "signatures.idx";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] io::Error),
    #[error("block does not extend the chain: {0}")]
    Chain(#[from] BlockError),
    #[error("block {0} conflicts with the stored block")]
    Conflict(u64),
    #[error("stored genesis differs from the expected one")]
    GenesisMismatch,
    #[error("store corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    New,
    /// The same block was already stored.
    Duplicate,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    number: u64,
    offset: u64,
    signatures: Vec<Signature>,
}

#[derive(Debug)]
struct Files {
    dir: PathBuf,
    blocks: File,
    index: File,
    blocks_len: u64,
}

#[derive(Debug, Default)]
struct State {
    blocks: Vec<Block>,
    tx_ids: HashSet<Digest>,
    canonical: Vec<u8>,
    files: Option<Files>,
}

#[derive(Debug, Default)]
struct Shared {
    state: Mutex<State>,
    grown: Condvar,
}

/// Shared handle: one writer (the committing node), any number of readers
/// (delivery streams, sync requests from peers).
#[derive(Debug, Clone, Default)]
pub struct BlockStore {
    shared: Arc<Shared>,
}

fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_be_bytes());
    out
}

/// Splits `bytes` into valid frames; returns bodies with their offsets and
/// the length of the valid prefix.
fn scan(bytes: &[u8]) -> (Vec<(u64, &[u8])>, u64) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while let Some(len) = bytes.get(pos..pos + 4) {
        let len = u32::from_be_bytes(len.try_into().expect("4 bytes")) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else { break };
        let Some(crc) = bytes.get(pos + 4 + len..pos + 8 + len) else { break };
        if crc32fast::hash(body).to_be_bytes() != crc {
            break;
        }
        out.push((pos as u64, body));
        pos += 8 + len;
    }
    (out, pos as u64)
}

fn tx_ids(block: &Block) -> impl Iterator<Item = Digest> + '_ {
    block.data.iter().map(|tx| Digest::of(tx))
}

impl BlockStore {
    pub fn in_memory(genesis: Block) -> Self {
        let store = Self::default();
        {
            let mut state = store.lock();
            state.canonical.extend(frame(&codec::encode(&genesis.canonical())));
            state.tx_ids.extend(tx_ids(&genesis));
            state.blocks.push(genesis);
        }
        store
    }

    /// Opens the store in `dir`, recovering from a torn tail, or initializes
    /// it with `genesis`.
    pub fn open(dir: &Path, genesis: &Block) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| OpenOptions::new().create(true).truncate(false).read(true).write(true).open(dir.join(name));
        let mut blocks_file = open(BLOCK_FILE)?;
        let mut index_file = open(INDEX_FILE)?;
        let mut block_bytes = Vec::new();
        blocks_file.read_to_end(&mut block_bytes)?;
        let mut index_bytes = Vec::new();
        index_file.read_to_end(&mut index_bytes)?;

        let (block_frames, _) = scan(&block_bytes);
        let (index_frames, _) = scan(&index_bytes);
        let mut blocks: Vec<Block> = Vec::new();
        let mut blocks_len = 0u64;
        let mut index_len = 0u64;
        for (i, ((offset, body), (index_offset, index_body))) in block_frames.iter().zip(&index_frames).enumerate() {
            let (Ok(mut block), Ok(entry)) = (
                codec::decode::<Block>(body),
                codec::decode::<IndexEntry>(index_body),
            ) else {
                break;
            };
            if entry.number != i as u64 || entry.offset != *offset || block.number() != i as u64 {
                break;
            }
            if let Some(prev) = blocks.last() {
                if block.check_structure(&prev.header).is_err() {
                    break;
                }
            }
            block.signatures = entry.signatures;
            blocks.push(block);
            blocks_len = offset + body.len() as u64 + 8;
            index_len = index_offset + index_body.len() as u64 + 8;
        }
        if blocks_len < block_bytes.len() as u64 || index_len < index_bytes.len() as u64 {
            warn!(dir = %dir.display(), blocks = blocks.len(), "truncating torn block store tail");
            blocks_file.set_len(blocks_len)?;
            index_file.set_len(index_len)?;
        }
        blocks_file.seek(SeekFrom::End(0))?;
        index_file.seek(SeekFrom::End(0))?;

        let store = Self::default();
        {
            let mut state = store.lock();
            state.canonical = block_bytes[..blocks_len as usize].to_vec();
            for block in &blocks {
                let ids: Vec<Digest> = tx_ids(block).collect();
                state.tx_ids.extend(ids);
            }
            state.blocks = blocks;
            state.files = Some(Files {
                dir: dir.to_path_buf(),
                blocks: blocks_file,
                index: index_file,
                blocks_len,
            });
        }
        match store.block(0) {
            Some(stored) if stored.canonical() != genesis.canonical() => return Err(StoreError::GenesisMismatch),
            Some(_) => {}
            None => {
                let mut state = store.lock();
                Self::write(&mut state, genesis.clone())?;
            }
        }
        Ok(store)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().expect("store lock")
    }

    fn write(state: &mut State, block: Block) -> Result<(), StoreError> {
        let body = frame(&codec::encode(&block.canonical()));
        if let Some(files) = &mut state.files {
            let entry = IndexEntry {
                number: block.number(),
                offset: files.blocks_len,
                signatures: block.signatures.clone(),
            };
            files.blocks.write_all(&body)?;
            files.blocks.sync_data()?;
            files.index.write_all(&frame(&codec::encode(&entry)))?;
            files.index.sync_data()?;
            files.blocks_len += body.len() as u64;
        }
        state.canonical.extend_from_slice(&body);
        let ids: Vec<Digest> = tx_ids(&block).collect();
        state.tx_ids.extend(ids);
        state.blocks.push(block);
        Ok(())
    }

    /// Appends the next block. Re-appending a stored block is a no-op.
    pub fn append(&self, block: Block) -> Result<Appended, StoreError> {
        let mut state = self.lock();
        let height = state.blocks.len() as u64 - 1;
        if block.number() <= height {
            let stored = &state.blocks[block.number() as usize];
            return if stored.canonical() == block.canonical() {
                Ok(Appended::Duplicate)
            } else {
                Err(StoreError::Conflict(block.number()))
            };
        }
        let last = state.blocks.last().expect("genesis present").header;
        block.check_structure(&last)?;
        Self::write(&mut state, block)?;
        drop(state);
        self.shared.grown.notify_all();
        Ok(Appended::New)
    }

    /// Number of the newest block (0 when only genesis is stored).
    pub fn height(&self) -> u64 {
        self.lock().blocks.len() as u64 - 1
    }

    pub fn block(&self, number: u64) -> Option<Block> {
        self.lock().blocks.get(number as usize).cloned()
    }

    pub fn last(&self) -> Block {
        self.lock().blocks.last().cloned().expect("genesis present")
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.lock().blocks.clone()
    }

    pub fn contains_tx(&self, id: &Digest) -> bool {
        self.lock().tx_ids.contains(id)
    }

    /// Exact contents of the block file.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.lock().canonical.clone()
    }

    /// SHA-256 of the block file.
    pub fn file_digest(&self) -> Digest {
        Digest::of(&self.lock().canonical)
    }

    /// Writes the block file and signature index into `dir` in one go, synced
    /// once at the end.
    pub fn export(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        let state = self.lock();
        let mut index = Vec::new();
        let mut offset = 0u64;
        for block in &state.blocks {
            let entry = IndexEntry {
                number: block.number(),
                offset,
                signatures: block.signatures.clone(),
            };
            index.extend(frame(&codec::encode(&entry)));
            offset += 8 + codec::encoded_len(&block.canonical());
        }
        if offset != state.canonical.len() as u64 {
            return Err(StoreError::Corrupt("block file length disagrees with its blocks".into()));
        }
        for (name, bytes) in [(BLOCK_FILE, &state.canonical), (INDEX_FILE, &index)] {
            let mut file = File::create(dir.join(name))?;
            file.write_all(bytes)?;
            file.sync_all()?;
        }
        Ok(())
    }

    /// Reads a store directory without modifying it. Unlike [`BlockStore::open`]
    /// a torn or inconsistent tail is an error.
    pub fn load(dir: &Path) -> Result<Vec<Block>, StoreError> {
        let block_bytes = std::fs::read(dir.join(BLOCK_FILE))?;
        let index_bytes = std::fs::read(dir.join(INDEX_FILE))?;
        let (block_frames, blocks_len) = scan(&block_bytes);
        let (index_frames, index_len) = scan(&index_bytes);
        if blocks_len != block_bytes.len() as u64 || index_len != index_bytes.len() as u64 {
            return Err(StoreError::Corrupt("trailing bytes after the last valid frame".into()));
        }
        if block_frames.len() != index_frames.len() {
            return Err(StoreError::Corrupt(format!(
                "{} blocks but {} index entries",
                block_frames.len(),
                index_frames.len()
            )));
        }
        let mut blocks = Vec::with_capacity(block_frames.len());
        for (i, ((offset, body), (_, index_body))) in block_frames.iter().zip(&index_frames).enumerate() {
            let corrupt = |what: &str| StoreError::Corrupt(format!("frame {i}: {what}"));
            let mut block: Block = codec::decode(body).map_err(|_| corrupt("undecodable block"))?;
            let entry: IndexEntry = codec::decode(index_body).map_err(|_| corrupt("undecodable index entry"))?;
            if entry.number != i as u64 || entry.offset != *offset {
                return Err(corrupt("index entry does not point at this block"));
            }
            block.signatures = entry.signatures;
            blocks.push(block);
        }
        Ok(blocks)
    }

    pub fn dir(&self) -> Option<PathBuf> {
        self.lock().files.as_ref().map(|f| f.dir.clone())
    }

    /// Waits until block `number` is stored or `timeout` passes.
    pub fn wait_for(&self, number: u64, timeout: Duration) -> Option<Block> {
        let deadline = Instant::now() + timeout;
        let mut state = self.lock();
        loop {
            if let Some(block) = state.blocks.get(number as usize) {
                return Some(block.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            state = self
                .shared
                .grown
                .wait_timeout(state, deadline - now)
                .expect("store lock")
                .0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bftorder::{ProposalMeta, Seq, View};
    use bytes::Bytes;

    fn genesis() -> Block {
        Block::genesis(Bytes::from_static(b"config"))
    }

    fn next(prev: &Block, tag: &str) -> Block {
        let n = prev.number() + 1;
        let mut b = Block::new(
            n,
            prev.hash(),
            vec![Bytes::copy_from_slice(tag.as_bytes())],
            ProposalMeta {
                view: View(0),
                sequence: Seq(n),
            },
        );
        b.signatures = vec![Signature {
            signer: bftorder::NodeId(n),
            value: Bytes::copy_from_slice(tag.as_bytes()),
            message: None,
        }];
        b
    }

    fn chain(len: usize) -> Vec<Block> {
        let mut out = vec![genesis()];
        for i in 0..len {
            let b = next(out.last().unwrap(), &format!("tx{i}"));
            out.push(b);
        }
        out
    }

    #[test]
    fn append_checks_chain_and_is_idempotent() {
        let blocks = chain(3);
        let store = BlockStore::in_memory(blocks[0].clone());
        assert!(matches!(store.append(blocks[2].clone()), Err(StoreError::Chain(_))));
        for b in &blocks[1..] {
            assert_eq!(store.append(b.clone()).unwrap(), Appended::New);
        }
        assert_eq!(store.append(blocks[2].clone()).unwrap(), Appended::Duplicate);
        let forged = next(&blocks[1], "other");
        assert!(matches!(store.append(forged), Err(StoreError::Conflict(2))));
        assert_eq!(store.height(), 3);
        assert!(store.contains_tx(&Digest::of(b"tx1")));
        assert!(!store.contains_tx(&Digest::of(b"tx9")));
    }

    #[test]
    fn file_store_round_trip_and_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let blocks = chain(5);
        let store = BlockStore::open(dir.path(), &blocks[0]).unwrap();
        for b in &blocks[1..] {
            store.append(b.clone()).unwrap();
        }
        let on_disk = std::fs::read(dir.path().join(BLOCK_FILE)).unwrap();
        assert_eq!(on_disk, store.canonical_bytes());
        drop(store);

        let reopened = BlockStore::open(dir.path(), &blocks[0]).unwrap();
        assert_eq!(reopened.blocks(), blocks);

        // Same blocks with different signature sets give the same block file.
        let mem = BlockStore::in_memory(blocks[0].clone());
        for b in &blocks[1..] {
            let mut b = b.clone();
            b.signatures.clear();
            mem.append(b).unwrap();
        }
        assert_eq!(mem.canonical_bytes(), on_disk);
    }

    #[test]
    fn torn_tail_is_truncated_at_sampled_cuts() {
        let dir = tempfile::tempdir().unwrap();
        let blocks = chain(3);
        {
            let store = BlockStore::open(dir.path(), &blocks[0]).unwrap();
            for b in &blocks[1..] {
                store.append(b.clone()).unwrap();
            }
        }
        let full = std::fs::read(dir.path().join(BLOCK_FILE)).unwrap();
        let index = std::fs::read(dir.path().join(INDEX_FILE)).unwrap();
        let cuts = (1..full.len()).step_by(7).chain(full.len() - 9..full.len());
        for cut in cuts {
            let d = tempfile::tempdir().unwrap();
            std::fs::write(d.path().join(BLOCK_FILE), &full[..cut]).unwrap();
            std::fs::write(d.path().join(INDEX_FILE), &index).unwrap();
            let store = BlockStore::open(d.path(), &blocks[0]).unwrap();
            let h = store.height() as usize;
            assert_eq!(store.blocks(), blocks[..=h].to_vec(), "cut {cut}");
            // Recovered prefix can be extended again.
            for b in &blocks[h + 1..] {
                store.append(b.clone()).unwrap();
            }
            assert_eq!(std::fs::read(d.path().join(BLOCK_FILE)).unwrap(), full);
        }
    }

    #[test]
    fn export_then_load_round_trips() {
        let blocks = chain(4);
        let store = BlockStore::in_memory(blocks[0].clone());
        for b in &blocks[1..] {
            store.append(b.clone()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        store.export(dir.path()).unwrap();
        assert_eq!(BlockStore::load(dir.path()).unwrap(), blocks);
        assert_eq!(std::fs::read(dir.path().join(BLOCK_FILE)).unwrap(), store.canonical_bytes());
        assert_eq!(Digest::of(&store.canonical_bytes()), store.file_digest());
        // The exported files open as a regular store.
        let opened = BlockStore::open(dir.path(), &blocks[0]).unwrap();
        assert_eq!(opened.blocks(), blocks);
        drop(opened);

        let mut torn = std::fs::read(dir.path().join(BLOCK_FILE)).unwrap();
        torn.pop();
        std::fs::write(dir.path().join(BLOCK_FILE), torn).unwrap();
        assert!(matches!(BlockStore::load(dir.path()), Err(StoreError::Corrupt(_))));
    }

    #[test]
    fn wrong_genesis_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        BlockStore::open(dir.path(), &genesis()).unwrap();
        let other = Block::genesis(Bytes::from_static(b"other"));
        assert!(matches!(
            BlockStore::open(dir.path(), &other),
            Err(StoreError::GenesisMismatch)
        ));
    }

    #[test]
    fn waiting_reader_wakes_on_append() {
        let blocks = chain(1);
        let store = BlockStore::in_memory(blocks[0].clone());
        let reader = store.clone();
        let handle = std::thread::spawn(move || reader.wait_for(1, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        store.append(blocks[1].clone()).unwrap();
        assert_eq!(handle.join().unwrap(), Some(blocks[1].clone()));
        assert_eq!(store.wait_for(2, Duration::from_millis(10)), None);
    }
}
