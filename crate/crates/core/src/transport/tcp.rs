//! Authenticated TCP transport.
//!
//! Frame: 4-byte big-endian length, then the encoded [`Envelope`], then a
//! 32-byte HMAC-SHA256 tag over the encoding. The length covers encoding and
//! tag. Every ordered pair of nodes shares a key derived from a cluster secret;
//! a frame whose tag does not verify under the key of its claimed sender is
//! dropped together with the connection.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use tracing::{debug, warn};

use crate::codec::{self, CodecError, MAX_ENCODED_LEN};
use crate::message::{ConsensusMessage, Envelope};
use crate::types::NodeId;

type HmacSha256 = Hmac<Sha256>;

pub const TAG_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("frame shorter than its tag")]
    Truncated,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("no key for sender {0}")]
    UnknownSender(NodeId),
    #[error("authentication tag mismatch for sender {0}")]
    BadTag(NodeId),
}

/// Key shared by `a` and `b`, the same whichever side derives it.
pub fn pair_key(secret: &[u8], a: NodeId, b: NodeId) -> [u8; 32] {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(&lo.0.to_be_bytes());
    mac.update(&hi.0.to_be_bytes());
    mac.finalize().into_bytes().into()
}

fn tag(key: &[u8], body: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(body);
    mac
}

pub fn encode_frame(envelope: &Envelope, key: &[u8]) -> Vec<u8> {
    let body = codec::encode(envelope);
    let mac = tag(key, &body).finalize().into_bytes();
    let mut frame = Vec::with_capacity(4 + body.len() + TAG_LEN);
    frame.extend_from_slice(&((body.len() + TAG_LEN) as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame.extend_from_slice(&mac);
    frame
}

/// Reads one frame and authenticates it with the key of its claimed sender.
pub fn read_frame<R: Read>(
    reader: &mut R,
    key_for: impl Fn(NodeId) -> Option<[u8; 32]>,
) -> Result<Envelope, FrameError> {
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len as u64 > MAX_ENCODED_LEN + TAG_LEN as u64 {
        return Err(FrameError::TooLarge(len));
    }
    if len < TAG_LEN {
        return Err(FrameError::Truncated);
    }
    let mut buf = vec![0u8; len];
    reader.read_exact(&mut buf)?;
    let (body, mac) = buf.split_at(len - TAG_LEN);
    let envelope: Envelope = codec::decode(body)?;
    let key = key_for(envelope.sender).ok_or(FrameError::UnknownSender(envelope.sender))?;
    tag(&key, body)
        .verify_slice(mac)
        .map_err(|_| FrameError::BadTag(envelope.sender))?;
    Ok(envelope)
}

#[derive(Debug, Clone)]
pub struct TcpConfig {
    pub id: NodeId,
    pub listen: SocketAddr,
    pub peers: BTreeMap<NodeId, SocketAddr>,
    pub secret: Vec<u8>,
}

/// One node's endpoint: a listener thread feeding an inbox, plus lazily
/// (re)established outbound connections.
pub struct TcpTransport {
    id: NodeId,
    local: SocketAddr,
    peers: BTreeMap<NodeId, SocketAddr>,
    keys: Arc<BTreeMap<NodeId, [u8; 32]>>,
    outbound: Mutex<BTreeMap<NodeId, TcpStream>>,
    inbox: Receiver<Envelope>,
    stop: Arc<AtomicBool>,
}

impl TcpTransport {
    pub fn bind(config: TcpConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(config.listen)?;
        let local = listener.local_addr()?;
        let keys: BTreeMap<NodeId, [u8; 32]> = config
            .peers
            .keys()
            .map(|&peer| (peer, pair_key(&config.secret, config.id, peer)))
            .collect();
        let keys = Arc::new(keys);
        let (tx, inbox) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        {
            let keys = keys.clone();
            let stop = stop.clone();
            let id = config.id;
            thread::Builder::new()
                .name(format!("accept-{id}"))
                .spawn(move || accept_loop(id, listener, keys, tx, stop))?;
        }
        Ok(Self {
            id: config.id,
            local,
            peers: config.peers,
            keys,
            outbound: Mutex::new(BTreeMap::new()),
            inbox,
            stop,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    /// Updates a peer address (for clusters bound to ephemeral ports).
    pub fn set_peer_addr(&mut self, peer: NodeId, addr: SocketAddr) {
        self.peers.insert(peer, addr);
    }

    pub fn send(&self, to: NodeId, message: ConsensusMessage) -> io::Result<()> {
        let key = self
            .keys
            .get(&to)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("unknown peer {to}")))?;
        let frame = encode_frame(
            &Envelope {
                sender: self.id,
                message,
            },
            key,
        );
        let mut outbound = self.outbound.lock().expect("outbound lock");
        for _ in 0..2 {
            if let std::collections::btree_map::Entry::Vacant(e) = outbound.entry(to) {
                let addr = self.peers[&to];
                let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(1))?;
                stream.set_nodelay(true)?;
                e.insert(stream);
            }
            let stream = outbound.get_mut(&to).expect("just inserted");
            match stream.write_all(&frame) {
                Ok(()) => return Ok(()),
                Err(e) => {
                    debug!(node = %self.id, %to, error = %e, "reconnecting");
                    outbound.remove(&to);
                }
            }
        }
        Err(io::Error::new(io::ErrorKind::BrokenPipe, format!("cannot reach {to}")))
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        self.inbox.recv_timeout(timeout).ok()
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(100));
    }
}

fn accept_loop(
    id: NodeId,
    listener: TcpListener,
    keys: Arc<BTreeMap<NodeId, [u8; 32]>>,
    tx: Sender<Envelope>,
    stop: Arc<AtomicBool>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let keys = keys.clone();
        let tx = tx.clone();
        let stop = stop.clone();
        let spawned = thread::Builder::new()
            .name(format!("conn-{id}"))
            .spawn(move || read_loop(id, stream, keys, tx, stop));
        if let Err(e) = spawned {
            warn!(node = %id, error = %e, "cannot spawn connection reader");
        }
    }
}

fn read_loop(
    id: NodeId,
    mut stream: TcpStream,
    keys: Arc<BTreeMap<NodeId, [u8; 32]>>,
    tx: Sender<Envelope>,
    stop: Arc<AtomicBool>,
) {
    let mut peer: Option<NodeId> = None;
    while !stop.load(Ordering::SeqCst) {
        match read_frame(&mut stream, |sender| keys.get(&sender).copied()) {
            Ok(envelope) => {
                // A connection speaks for one sender only.
                if peer.is_some_and(|p| p != envelope.sender) {
                    warn!(node = %id, "sender changed mid-connection, closing");
                    return;
                }
                peer = Some(envelope.sender);
                if tx.send(envelope).is_err() {
                    return;
                }
            }
            Err(FrameError::Io(_)) => return,
            Err(e) => {
                warn!(node = %id, error = %e, "rejecting frame, closing connection");
                return;
            }
        }
    }
}
