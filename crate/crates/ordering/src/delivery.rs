//! Block delivery to consumers: full blocks, or header and metadata only.
//!
//! Over TCP a subscriber sends one frame holding a [`DeliveryRequest`] and
//! then reads a frame per item. Frames are a 4-byte big-endian length followed
//! by the encoding.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use bftorder::codec;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tracing::debug;

use crate::block::{Block, BlockSummary};
use crate::store::BlockStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryMode {
    Full,
    HeaderMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryItem {
    Block(Block),
    Summary(BlockSummary),
}

impl DeliveryItem {
    pub fn number(&self) -> u64 {
        match self {
            DeliveryItem::Block(b) => b.number(),
            DeliveryItem::Summary(s) => s.header.number,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRequest {
    pub from: u64,
    pub mode: DeliveryMode,
}

/// Ascending stream of stored blocks starting at `from`. Reading past the
/// frontier waits for the next commit.
#[derive(Debug, Clone)]
pub struct BlockStream {
    store: BlockStore,
    next: u64,
    mode: DeliveryMode,
}

pub fn serve_blocks(store: &BlockStore, from: u64, mode: DeliveryMode) -> BlockStream {
    BlockStream {
        store: store.clone(),
        next: from,
        mode,
    }
}

impl BlockStream {
    fn item(&self, block: Block) -> DeliveryItem {
        match self.mode {
            DeliveryMode::Full => DeliveryItem::Block(block),
            DeliveryMode::HeaderMeta => DeliveryItem::Summary(block.summary()),
        }
    }

    /// Next item if already stored.
    pub fn try_next(&mut self) -> Option<DeliveryItem> {
        let block = self.store.block(self.next)?;
        self.next += 1;
        Some(self.item(block))
    }

    pub fn next_timeout(&mut self, timeout: Duration) -> Option<DeliveryItem> {
        let block = self.store.wait_for(self.next, timeout)?;
        self.next += 1;
        Some(self.item(block))
    }

    pub fn position(&self) -> u64 {
        self.next
    }
}

impl Iterator for BlockStream {
    type Item = DeliveryItem;

    /// Blocks until the next block is committed.
    fn next(&mut self) -> Option<DeliveryItem> {
        loop {
            if let Some(item) = self.next_timeout(Duration::from_secs(3600)) {
                return Some(item);
            }
        }
    }
}

pub fn write_frame<T: Serialize, W: Write>(w: &mut W, value: &T) -> io::Result<()> {
    let body = codec::encode(value);
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

pub fn read_frame<T: DeserializeOwned, R: Read>(r: &mut R) -> io::Result<T> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as u64;
    if len > codec::MAX_ENCODED_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    codec::decode(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Serves delivery subscriptions on `listener` until it fails, one thread per
/// subscriber.
pub fn serve_tcp(listener: TcpListener, store: BlockStore) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let store = store.clone();
            thread::spawn(move || {
                let Ok(request) = read_frame::<DeliveryRequest, _>(&mut stream) else {
                    return;
                };
                debug!(from = request.from, mode = ?request.mode, "delivery subscriber");
                for item in serve_blocks(&store, request.from, request.mode) {
                    if write_frame(&mut stream, &item).is_err() {
                        return;
                    }
                }
            });
        }
    })
}

/// Client side of a TCP delivery subscription.
pub struct Subscription {
    stream: TcpStream,
}

impl Subscription {
    pub fn connect(addr: SocketAddr, request: DeliveryRequest) -> io::Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        write_frame(&mut stream, &request)?;
        Ok(Self { stream })
    }

    pub fn recv(&mut self, timeout: Duration) -> io::Result<DeliveryItem> {
        self.stream.set_read_timeout(Some(timeout))?;
        read_frame(&mut self.stream)
    }
}
