//! Models served by external worker processes. A worker connection carries
//! ENCODE/DECODE requests out and their results back; [`RemoteBackend`]
//! makes that look like any other [`SegBackend`].

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use volseg_core::backend::{
    check_decode_request, BackendError, Embedding, MaskResult, ModelDescriptor, ModelKind, PromptSet, SegBackend,
};
use volseg_core::protocol::{rle_decode, write_frame, Frame, RleMask, ServerMessage, WorkerOutcome};
use volseg_core::volume::NormalizedSlice;

/// Serializes whole frames onto one socket.
pub struct ConnWriter {
    stream: Mutex<TcpStream>,
}

impl ConnWriter {
    pub fn new(stream: TcpStream) -> Self {
        ConnWriter { stream: Mutex::new(stream) }
    }

    pub fn send(&self, msg: &ServerMessage, flags: u16) -> io::Result<()> {
        self.send_frame(&msg.to_frame(flags))
    }

    pub fn send_frame(&self, frame: &Frame) -> io::Result<()> {
        let mut s = self.stream.lock();
        write_frame(&mut *s, frame).map_err(|e| io::Error::other(e.to_string()))
    }

    pub fn shutdown(&self) {
        let _ = self.stream.lock().shutdown(Shutdown::Both);
    }
}

pub enum WorkerReply {
    Encoded(WorkerOutcome<Vec<u8>>),
    Decoded(WorkerOutcome<(f32, RleMask)>),
}

/// Request/response correlation for one worker connection.
pub struct WorkerLink {
    writer: Arc<ConnWriter>,
    pending: Mutex<HashMap<u64, SyncSender<WorkerReply>>>,
    next_id: AtomicU64,
    alive: AtomicBool,
    timeout: Duration,
}

impl WorkerLink {
    pub fn new(writer: Arc<ConnWriter>, timeout: Duration) -> Self {
        WorkerLink {
            writer,
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            alive: AtomicBool::new(true),
            timeout,
        }
    }

    fn call(&self, build: impl FnOnce(u64) -> ServerMessage) -> Result<WorkerReply, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = sync_channel(1);
        {
            let mut pending = self.pending.lock();
            // checked under the lock so fail_all cannot miss this entry
            if !self.alive.load(Ordering::Acquire) {
                return Err(BackendError::WorkerLost);
            }
            pending.insert(id, tx);
        }
        if self.writer.send(&build(id), 0).is_err() {
            self.pending.lock().remove(&id);
            return Err(BackendError::WorkerLost);
        }
        match rx.recv_timeout(self.timeout) {
            Ok(reply) => Ok(reply),
            Err(RecvTimeoutError::Disconnected) => Err(BackendError::WorkerLost),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().remove(&id);
                Err(BackendError::Unavailable(format!("no reply within {:?}", self.timeout)))
            }
        }
    }

    /// Delivers a worker's reply. Replies to unknown or timed-out requests
    /// are dropped.
    pub fn complete(&self, request_id: u64, reply: WorkerReply) -> bool {
        match self.pending.lock().remove(&request_id) {
            Some(tx) => tx.send(reply).is_ok(),
            None => false,
        }
    }

    /// Fails every in-flight request and refuses new ones.
    pub fn fail_all(&self) {
        let mut pending = self.pending.lock();
        self.alive.store(false, Ordering::Release);
        pending.clear();
    }

    pub fn in_flight(&self) -> usize {
        self.pending.lock().len()
    }
}

pub struct RemoteBackend {
    descriptor: ModelDescriptor,
    link: Arc<WorkerLink>,
}

impl RemoteBackend {
    pub fn new(model_id: String, embedding_bytes_estimate: u64, link: Arc<WorkerLink>) -> Self {
        RemoteBackend {
            descriptor: ModelDescriptor { model_id, kind: ModelKind::ExternalWorker, embedding_bytes_estimate },
            link,
        }
    }
}

fn mismatched() -> BackendError {
    BackendError::Remote("reply type does not match the request".into())
}

impl SegBackend for RemoteBackend {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn encode_slice(&self, slice: &NormalizedSlice) -> Result<Embedding, BackendError> {
        let reply = self.link.call(|request_id| ServerMessage::EncodeRequest {
            request_id,
            rows: slice.rows as u32,
            cols: slice.cols as u32,
            pixels: slice.pixels.clone(),
        })?;
        match reply {
            WorkerReply::Encoded(WorkerOutcome::Ok(blob)) => Ok(Embedding {
                model_id: self.descriptor.model_id.clone(),
                rows: slice.rows,
                cols: slice.cols,
                blob: Arc::from(blob),
            }),
            WorkerReply::Encoded(WorkerOutcome::Err(e)) => Err(BackendError::Remote(e)),
            WorkerReply::Decoded(_) => Err(mismatched()),
        }
    }

    fn decode_mask(&self, embedding: &Embedding, prompts: &PromptSet) -> Result<MaskResult, BackendError> {
        check_decode_request(&self.descriptor.model_id, embedding, prompts)?;
        let reply = self.link.call(|request_id| ServerMessage::DecodeRequest {
            request_id,
            rows: embedding.rows as u32,
            cols: embedding.cols as u32,
            blob: embedding.blob.to_vec(),
            prompts: prompts.clone(),
        })?;
        match reply {
            WorkerReply::Decoded(WorkerOutcome::Ok((score, rle))) => {
                let bitmap = rle_decode(&rle).map_err(|e| BackendError::Remote(format!("bad mask: {e}")))?;
                Ok(MaskResult { bitmap, score, model_id: self.descriptor.model_id.clone() })
            }
            WorkerReply::Decoded(WorkerOutcome::Err(e)) => Err(BackendError::Remote(e)),
            WorkerReply::Encoded(_) => Err(mismatched()),
        }
    }
}
