//! Host-side slot store serviced by one background transfer worker.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use wm_tensor::Buffer;

use crate::error::{OffloadError, Result};

/// Where evicted tensors live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoreKind {
    /// In-process byte arena.
    #[default]
    Memory,
    /// Anonymous temporary file.
    File,
}

trait Backend: Send {
    fn put(&mut self, slot: usize, values: &[f64]) -> std::io::Result<()>;
    fn get(&mut self, slot: usize) -> std::io::Result<Vec<f64>>;
}

fn encode(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

#[derive(Default)]
struct MemoryBackend {
    slots: HashMap<usize, Vec<u8>>,
}

impl Backend for MemoryBackend {
    fn put(&mut self, slot: usize, values: &[f64]) -> std::io::Result<()> {
        self.slots.insert(slot, encode(values));
        Ok(())
    }

    fn get(&mut self, slot: usize) -> std::io::Result<Vec<f64>> {
        let bytes = self
            .slots
            .remove(&slot)
            .ok_or_else(|| std::io::Error::other(format!("slot {slot} not stored")))?;
        Ok(decode(&bytes))
    }
}

struct FileBackend {
    file: File,
    end: u64,
    index: HashMap<usize, (u64, usize)>,
}

impl Backend for FileBackend {
    fn put(&mut self, slot: usize, values: &[f64]) -> std::io::Result<()> {
        let bytes = encode(values);
        self.file.seek(SeekFrom::Start(self.end))?;
        self.file.write_all(&bytes)?;
        self.index.insert(slot, (self.end, bytes.len()));
        self.end += bytes.len() as u64;
        Ok(())
    }

    fn get(&mut self, slot: usize) -> std::io::Result<Vec<f64>> {
        let (offset, len) = self
            .index
            .remove(&slot)
            .ok_or_else(|| std::io::Error::other(format!("slot {slot} not stored")))?;
        let mut bytes = vec![0; len];
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.read_exact(&mut bytes)?;
        Ok(decode(&bytes))
    }
}

#[derive(Debug)]
enum SlotState {
    Stored,
    Arrived(Vec<f64>),
}

#[derive(Default)]
struct SlotTable {
    slots: HashMap<usize, SlotState>,
    failure: Option<String>,
}

struct Shared {
    table: Mutex<SlotTable>,
    arrived: Condvar,
}

enum Request {
    Evict { slot: usize, data: Arc<Buffer> },
    Fetch { slot: usize },
}

/// Handle to the host store and its transfer worker. Requests are served
/// in FIFO order; the worker exits when the handle is dropped.
pub struct TransferWorker {
    tx: Option<SyncSender<Request>>,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl TransferWorker {
    /// `queue_depth` bounds the number of queued requests; senders block
    /// beyond it.
    pub fn spawn(kind: StoreKind, latency: Duration, queue_depth: usize) -> Result<Self> {
        let backend: Box<dyn Backend> = match kind {
            StoreKind::Memory => Box::new(MemoryBackend::default()),
            StoreKind::File => Box::new(FileBackend {
                file: tempfile::tempfile()
                    .map_err(|e| OffloadError::Transfer(format!("temp file: {e}")))?,
                end: 0,
                index: HashMap::new(),
            }),
        };
        let shared = Arc::new(Shared {
            table: Mutex::new(SlotTable::default()),
            arrived: Condvar::new(),
        });
        let (tx, rx) = sync_channel(queue_depth.max(1));
        let worker_shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("offload-transfer".into())
            .spawn(move || serve(rx, backend, worker_shared, latency))
            .map_err(|e| OffloadError::Transfer(format!("spawn: {e}")))?;
        Ok(TransferWorker {
            tx: Some(tx),
            shared,
            handle: Some(handle),
        })
    }

    fn send(&self, req: Request) -> Result<()> {
        self.tx
            .as_ref()
            .expect("sender lives until drop")
            .send(req)
            .map_err(|_| OffloadError::Transfer("worker stopped".into()))
    }

    pub(crate) fn evict(&self, slot: usize, data: Arc<Buffer>) -> Result<()> {
        self.send(Request::Evict { slot, data })
    }

    pub(crate) fn fetch(&self, slot: usize) -> Result<()> {
        self.send(Request::Fetch { slot })
    }

    /// Blocks until `slot` has arrived and takes it. Returns the values and
    /// whether the caller had to wait.
    pub(crate) fn take_arrived(&self, slot: usize) -> Result<(Vec<f64>, bool)> {
        let mut table = self.shared.table.lock().expect("slot table lock");
        let mut waited = false;
        loop {
            if let Some(msg) = &table.failure {
                return Err(OffloadError::Transfer(msg.clone()));
            }
            if let Some(SlotState::Arrived(_)) = table.slots.get(&slot) {
                let Some(SlotState::Arrived(v)) = table.slots.remove(&slot) else {
                    unreachable!()
                };
                return Ok((v, waited));
            }
            waited = true;
            table = self.shared.arrived.wait(table).expect("slot table lock");
        }
    }
}

impl Drop for TransferWorker {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(rx: Receiver<Request>, mut backend: Box<dyn Backend>, shared: Arc<Shared>, latency: Duration) {
    let fail = |msg: String| {
        let mut t = shared.table.lock().expect("slot table lock");
        t.failure = Some(msg);
        shared.arrived.notify_all();
    };
    while let Ok(req) = rx.recv() {
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }
        match req {
            Request::Evict { slot, data } => {
                if let Err(e) = backend.put(slot, data.values()) {
                    fail(format!("evict slot {slot}: {e}"));
                    return;
                }
                drop(data);
                let mut t = shared.table.lock().expect("slot table lock");
                t.slots.insert(slot, SlotState::Stored);
            }
            Request::Fetch { slot } => match backend.get(slot) {
                Ok(values) => {
                    let mut t = shared.table.lock().expect("slot table lock");
                    t.slots.insert(slot, SlotState::Arrived(values));
                    shared.arrived.notify_all();
                }
                Err(e) => {
                    fail(format!("fetch slot {slot}: {e}"));
                    return;
                }
            },
        }
    }
}
