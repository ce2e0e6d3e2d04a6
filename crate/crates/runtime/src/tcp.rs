//! TCP transport.
//!
//! Every connection opens with a 6-byte hello, `b"PBFT"` followed by the
//! dialer's `u16` id (little-endian), and then carries length-prefixed
//! frames in both directions. A node dials every replica it sends to and
//! reads from every connection it holds, so peers that never listen
//! (clients) get their replies on the socket they opened.
//!
//! Outbound frames queue per destination. A full queue or a broken
//! connection drops frames; dialed links retry every 200 ms.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use serde::Deserialize;
use thiserror::Error;

use pbft_core::wire::{FrameDecoder, NodeId, DEFAULT_MAX_FRAME};

use crate::pipeline::{Egress, Ingress};

pub const HELLO_MAGIC: &[u8; 4] = b"PBFT";
pub const RECONNECT: Duration = Duration::from_millis(200);
const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error("cannot read deployment file: {0}")]
    Io(#[from] io::Error),
    #[error("invalid deployment file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid deployment file: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub id: NodeId,
    pub addr: SocketAddr,
}

/// Replica ids and addresses. Ids must be exactly `0..n`.
///
/// ```toml
/// [[node]]
/// id = 0
/// addr = "127.0.0.1:7000"
/// ```
#[derive(Clone, Debug, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Deployment {
    #[serde(rename = "node")]
    pub nodes: Vec<Endpoint>,
}

impl Deployment {
    pub fn parse(text: &str) -> Result<Self, DeploymentError> {
        let d: Deployment = toml::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self, DeploymentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `n` replicas on consecutive loopback ports.
    pub fn localhost(n: u16, base_port: u16) -> Self {
        Deployment {
            nodes: (0..n)
                .map(|id| Endpoint {
                    id,
                    addr: SocketAddr::from(([127, 0, 0, 1], base_port + id)),
                })
                .collect(),
        }
    }

    /// `n` replicas on loopback ports that were free a moment ago.
    pub fn localhost_free(n: u16) -> io::Result<Self> {
        let held: Vec<TcpListener> = (0..n)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<Result<_, _>>()?;
        let nodes = held
            .iter()
            .zip(0..)
            .map(|(l, id)| l.local_addr().map(|addr| Endpoint { id, addr }))
            .collect::<Result<_, _>>()?;
        Ok(Deployment { nodes })
    }

    pub fn validate(&self) -> Result<(), DeploymentError> {
        if self.nodes.is_empty() {
            return Err(DeploymentError::Invalid("no nodes".into()));
        }
        let mut ids = HashSet::new();
        let mut addrs = HashSet::new();
        for e in &self.nodes {
            if !ids.insert(e.id) {
                return Err(DeploymentError::Invalid(format!(
                    "node id {} appears twice",
                    e.id
                )));
            }
            if !addrs.insert(e.addr) {
                return Err(DeploymentError::Invalid(format!(
                    "address {} appears twice",
                    e.addr
                )));
            }
        }
        let n = self.nodes.len();
        if let Some(bad) = self.nodes.iter().find(|e| e.id as usize >= n) {
            return Err(DeploymentError::Invalid(format!(
                "node ids must be 0..{n}, found {}",
                bad.id
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> u16 {
        self.nodes.len() as u16
    }

    pub fn addr(&self, id: NodeId) -> Option<SocketAddr> {
        self.nodes.iter().find(|e| e.id == id).map(|e| e.addr)
    }

    pub fn to_toml(&self) -> String {
        self.nodes
            .iter()
            .map(|e| format!("[[node]]\nid = {}\naddr = \"{}\"\n", e.id, e.addr))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Receives frames read off connections.
pub trait Inbox: Send + Sync + 'static {
    fn deliver(&self, from: NodeId, frame: &[u8]);
}

impl Inbox for Ingress {
    fn deliver(&self, from: NodeId, frame: &[u8]) {
        self.push(from, frame);
    }
}

impl Inbox for Sender<(NodeId, Vec<u8>)> {
    fn deliver(&self, from: NodeId, frame: &[u8]) {
        let _ = self.send((from, frame.to_vec()));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TcpConfig {
    pub queue_capacity: usize,
    pub max_frame: usize,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            queue_capacity: 8192,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

#[derive(Debug, Default)]
pub struct TcpStats {
    pub frames_out: AtomicU64,
    pub frames_in: AtomicU64,
    pub bytes_out: AtomicU64,
    /// Frames lost to full queues or broken connections.
    pub dropped: AtomicU64,
    pub connects: AtomicU64,
}

struct Inner {
    me: NodeId,
    deployment: Deployment,
    cfg: TcpConfig,
    stop: AtomicBool,
    stats: TcpStats,
    links: Mutex<HashMap<NodeId, Sender<Vec<u8>>>>,
    inbox: Mutex<Option<Arc<dyn Inbox>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    /// Open sockets, shut down on stop so blocked reads return.
    sockets: Mutex<Vec<TcpStream>>,
}

pub struct TcpFabric {
    inner: Arc<Inner>,
    listener: Mutex<Option<TcpListener>>,
    local_addr: Option<SocketAddr>,
}

impl TcpFabric {
    /// Binds the listening socket when `me` is in the deployment. Nothing
    /// is accepted until [`TcpFabric::serve`].
    pub fn bind(me: NodeId, deployment: Deployment, cfg: TcpConfig) -> io::Result<Arc<Self>> {
        let listener = match deployment.addr(me) {
            Some(addr) => {
                let l = TcpListener::bind(addr)?;
                l.set_nonblocking(true)?;
                Some(l)
            }
            None => None,
        };
        let local_addr = listener.as_ref().map(|l| l.local_addr()).transpose()?;
        Ok(Arc::new(TcpFabric {
            inner: Arc::new(Inner {
                me,
                deployment,
                cfg,
                stop: AtomicBool::new(false),
                stats: TcpStats::default(),
                links: Mutex::new(HashMap::new()),
                inbox: Mutex::new(None),
                threads: Mutex::new(Vec::new()),
                sockets: Mutex::new(Vec::new()),
            }),
            listener: Mutex::new(listener),
            local_addr,
        }))
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    pub fn stats(&self) -> &TcpStats {
        &self.inner.stats
    }

    /// Starts accepting connections and delivering their frames to `inbox`.
    /// Frames arriving on dialed links go to `inbox` as well.
    pub fn serve(&self, inbox: Arc<dyn Inbox>) {
        *self.inner.inbox.lock().unwrap_or_else(|e| e.into_inner()) = Some(inbox.clone());
        if let Some(l) = self
            .listener
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
        {
            let inner = self.inner.clone();
            inner
                .clone()
                .spawn("accept".into(), move || inner.accept_loop(l, inbox));
        }
    }

    /// Dials every replica now instead of on first send.
    pub fn connect_all(&self) {
        for e in &self.inner.deployment.nodes {
            if e.id != self.inner.me {
                self.inner.link(e.id);
            }
        }
    }

    pub fn shutdown(&self) {
        let inner = &self.inner;
        inner.stop.store(true, Ordering::Release);
        inner.inbox.lock().unwrap_or_else(|e| e.into_inner()).take();
        for s in inner
            .sockets
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain(..)
        {
            let _ = s.shutdown(Shutdown::Both);
        }
        inner
            .links
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clear();
        loop {
            let batch: Vec<_> =
                std::mem::take(&mut *inner.threads.lock().unwrap_or_else(|e| e.into_inner()));
            if batch.is_empty() {
                break;
            }
            for h in batch {
                let _ = h.join();
            }
        }
    }
}

impl Drop for TcpFabric {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Egress for TcpFabric {
    fn send(&self, to: NodeId, frame: Vec<u8>) {
        let inner = &self.inner;
        let Some(tx) = inner.link(to) else {
            inner.dropped();
            return;
        };
        match tx.try_send(frame) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => inner.dropped(),
            Err(TrySendError::Disconnected(_)) => {
                inner
                    .links
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .remove(&to);
                inner.dropped();
            }
        }
    }
}

impl Inner {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn inbox(&self) -> Option<Arc<dyn Inbox>> {
        self.inbox.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn dropped(&self) {
        self.stats.dropped.fetch_add(1, Ordering::Relaxed);
    }

    fn spawn(self: Arc<Self>, name: String, f: impl FnOnce() + Send + 'static) {
        match thread::Builder::new().name(name).spawn(f) {
            Ok(h) => self
                .threads
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(h),
            Err(e) => log::error!("cannot spawn transport thread: {e}"),
        }
    }

    fn track(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.sockets
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(c);
        }
    }

    /// The send queue for `to`, dialing it if it is a replica we have not
    /// talked to yet. Unknown ids only have a queue once they connected.
    fn link(self: &Arc<Self>, to: NodeId) -> Option<Sender<Vec<u8>>> {
        let mut links = self.links.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(tx) = links.get(&to) {
            return Some(tx.clone());
        }
        let addr = self.deployment.addr(to)?;
        if self.stopped() {
            return None;
        }
        let (tx, rx) = bounded(self.cfg.queue_capacity);
        links.insert(to, tx.clone());
        let me = self.clone();
        self.clone()
            .spawn(format!("dial-{to}"), move || me.dial_loop(to, addr, rx));
        Some(tx)
    }

    fn dial_loop(self: Arc<Self>, to: NodeId, addr: SocketAddr, rx: Receiver<Vec<u8>>) {
        while !self.stopped() {
            let stream = match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("{} cannot reach {to} at {addr}: {e}", self.me);
                    thread::sleep(RECONNECT);
                    continue;
                }
            };
            self.stats.connects.fetch_add(1, Ordering::Relaxed);
            let _ = stream.set_nodelay(true);
            let mut hello = HELLO_MAGIC.to_vec();
            hello.extend_from_slice(&self.me.to_le_bytes());
            let mut w = match stream.try_clone() {
                Ok(w) => w,
                Err(_) => continue,
            };
            if w.write_all(&hello).is_err() {
                thread::sleep(RECONNECT);
                continue;
            }
            self.track(&stream);
            if let Some(inbox) = self.inbox() {
                let me = self.clone();
                self.clone().spawn(format!("read-{to}"), move || {
                    me.read_loop(to, stream, inbox)
                });
            }
            self.write_loop(to, &mut w, &rx);
            let _ = w.shutdown(Shutdown::Both);
            if !self.stopped() {
                thread::sleep(RECONNECT);
            }
        }
    }

    /// Returns when the connection breaks or the fabric stops.
    fn write_loop(&self, to: NodeId, w: &mut TcpStream, rx: &Receiver<Vec<u8>>) {
        loop {
            let frame = match rx.recv_timeout(POLL) {
                Ok(f) => f,
                Err(RecvTimeoutError::Timeout) if !self.stopped() => continue,
                Err(_) => return,
            };
            if let Err(e) = w.write_all(&frame) {
                log::debug!("{} lost connection to {to}: {e}", self.me);
                self.dropped();
                return;
            }
            self.stats.frames_out.fetch_add(1, Ordering::Relaxed);
            self.stats
                .bytes_out
                .fetch_add(frame.len() as u64, Ordering::Relaxed);
        }
    }

    fn accept_loop(self: Arc<Self>, l: TcpListener, inbox: Arc<dyn Inbox>) {
        while !self.stopped() {
            match l.accept() {
                Ok((s, _)) => {
                    let me = self.clone();
                    let inbox = inbox.clone();
                    self.clone()
                        .spawn("conn".into(), move || me.accepted(s, inbox));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(10))
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(RECONNECT);
                }
            }
        }
    }

    fn accepted(self: Arc<Self>, mut s: TcpStream, inbox: Arc<dyn Inbox>) {
        let _ = s.set_nonblocking(false);
        let _ = s.set_nodelay(true);
        let _ = s.set_read_timeout(Some(Duration::from_secs(5)));
        let mut hello = [0u8; 6];
        if s.read_exact(&mut hello).is_err() || &hello[..4] != HELLO_MAGIC {
            log::warn!("dropping connection without a valid hello");
            return;
        }
        let peer = u16::from_le_bytes([hello[4], hello[5]]);
        self.track(&s);
        // Replicas get their own dialed link; anyone else is answered here.
        if self.deployment.addr(peer).is_none() {
            if let Ok(mut w) = s.try_clone() {
                let (tx, rx) = bounded(self.cfg.queue_capacity);
                self.links
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(peer, tx);
                let me = self.clone();
                self.clone().spawn(format!("reply-{peer}"), move || {
                    me.write_loop(peer, &mut w, &rx);
                    let _ = w.shutdown(Shutdown::Both);
                });
            }
        }
        self.read_loop(peer, s, inbox);
    }

    fn read_loop(&self, peer: NodeId, mut s: TcpStream, inbox: Arc<dyn Inbox>) {
        let _ = s.set_read_timeout(Some(POLL));
        let mut dec = FrameDecoder::new(self.cfg.max_frame);
        let mut buf = vec![0u8; 64 * 1024];
        while !self.stopped() {
            let n = match s.read(&mut buf) {
                Ok(0) => return,
                Ok(n) => n,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    continue
                }
                Err(_) => return,
            };
            dec.push(&buf[..n]);
            loop {
                match dec.next_frame() {
                    Ok(Some(f)) => {
                        self.stats.frames_in.fetch_add(1, Ordering::Relaxed);
                        inbox.deliver(peer, &f);
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("{} closing stream from {peer}: {e}", self.me);
                        let _ = s.shutdown(Shutdown::Both);
                        return;
                    }
                }
            }
        }
    }
}
