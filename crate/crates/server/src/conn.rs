//! One thread per connection. A connection becomes either a client session
//! (after LOAD_VOLUME) or a model worker (after REGISTER_WORKER).

use std::io::BufReader;
use std::net::TcpStream;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tracing::{debug, info};

use volseg_core::backend::{BackendError, RegistryError};
use volseg_core::protocol::{
    read_frame, rle_encode, ClientMessage, ErrorCode, ExportKind, Frame, MaskPayload, PayloadError, ReadError,
    ServerMessage, VolumeMeta, FLAG_MORE, VERSION,
};
use volseg_core::session::{Box3D, Session, SessionError};
use volseg_core::volume::{
    extract_surface, load_volume, write_label_volume, write_stl, Axis, SliceRef, VolumeError, WindowLevel,
};

use crate::queue::TaskKind;
use crate::server::{Job, SessionHandle, Shared};
use crate::worker::{ConnWriter, RemoteBackend, WorkerLink, WorkerReply};

/// Largest data section of one EXPORT_CHUNK frame.
pub const EXPORT_CHUNK_BYTES: usize = 16 << 20;

pub const SERVER_NAME: &str = "volseg";

#[derive(Debug)]
struct Failure {
    code: ErrorCode,
    detail: String,
}

impl Failure {
    fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        Failure { code, detail: detail.into() }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        let code = match &e {
            SessionError::EmptyUndo => ErrorCode::EmptyUndo,
            SessionError::Backend(BackendError::WorkerLost | BackendError::Unavailable(_)) => ErrorCode::WorkerLost,
            SessionError::Backend(
                BackendError::Remote(_)
                | BackendError::ShapeMismatch { .. }
                | BackendError::WrongModel { .. }
                | BackendError::MalformedEmbedding,
            ) => ErrorCode::Internal,
            SessionError::Volume(VolumeError::Io(_)) => ErrorCode::Io,
            _ => ErrorCode::InvalidRequest,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        SessionError::from(e).into()
    }
}

struct Connection {
    shared: Arc<Shared>,
    writer: Arc<ConnWriter>,
    session: Option<Arc<SessionHandle>>,
    worker: Option<(String, Arc<WorkerLink>)>,
}

pub(crate) fn serve_connection(shared: Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else { return };
    let writer = Arc::new(ConnWriter::new(write_half));
    let conn_id = shared.add_connection(writer.clone());
    let mut conn = Connection { shared: shared.clone(), writer, session: None, worker: None };
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    debug!(?peer, "connection opened");
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => conn.dispatch(frame),
            Ok(None) => break,
            Err(ReadError::Frame(e)) => {
                // the stream cannot be resynchronised, so report and hang up
                conn.send(&ServerMessage::error(ErrorCode::BadPayload, format!("framing error: {e}")), 0);
                debug!(?peer, error = %e, "framing error");
                break;
            }
            Err(ReadError::Io(e)) => {
                debug!(?peer, error = %e, "read failed");
                break;
            }
        }
    }
    conn.close();
    shared.remove_connection(conn_id);
    debug!(?peer, "connection closed");
}

impl Connection {
    fn send(&self, msg: &ServerMessage, flags: u16) {
        // a dead peer surfaces as EOF on the read side
        let _ = self.writer.send(msg, flags);
    }

    fn dispatch(&mut self, frame: Frame) {
        let start = Instant::now();
        let is_worker_reply = matches!(frame.msg_type, 0x12 | 0x14);
        let outcome = match ClientMessage::decode(&frame) {
            Ok(msg) => self.handle(msg),
            Err(PayloadError::UnknownType(t) | PayloadError::Unexpected(t)) => {
                Err(Failure::new(ErrorCode::Unsupported, format!("unsupported message type {t:#04x}")))
            }
            Err(e) => Err(Failure::new(ErrorCode::BadPayload, e.to_string())),
        };
        if let Err(f) = &outcome {
            self.send(&ServerMessage::error(f.code, f.detail.clone()), 0);
        }
        let session = self.session.as_ref().map_or(0, |h| h.id);
        let latency_us = start.elapsed().as_micros() as u64;
        let error = outcome.err().map(|f| f.code as u16);
        if is_worker_reply {
            debug!(session, msg_type = frame.msg_type, latency_us, ?error, "worker reply");
        } else {
            info!(session, msg_type = frame.msg_type, latency_us, ?error, "request");
        }
    }

    fn handle(&mut self, msg: ClientMessage) -> Result<(), Failure> {
        match msg {
            ClientMessage::Hello { .. } => {
                self.send(&ServerMessage::Hello { version: VERSION, name: SERVER_NAME.into() }, 0);
                Ok(())
            }
            ClientMessage::ListModels => {
                let models = self
                    .shared
                    .registry
                    .list_models()
                    .into_iter()
                    .map(|d| volseg_core::protocol::ModelInfo {
                        model_id: d.model_id,
                        kind: d.kind,
                        embedding_bytes_estimate: d.embedding_bytes_estimate,
                    })
                    .collect();
                self.send(&ServerMessage::ModelList(models), 0);
                Ok(())
            }
            ClientMessage::LoadVolume { path } => self.load_volume(&path),
            ClientMessage::SetWindowLevel { window, level } => {
                let wl = WindowLevel::new(window, level)?;
                let h = self.session()?;
                let mut s = h.session.lock();
                let old = s.window_level();
                s.set_window_level(wl);
                if old != wl {
                    // embeddings of the old setting cannot be served again
                    self.shared.cache.invalidate(s.volume().id(), Some(s.model_id()));
                }
                // reply with the state at the switch, before background work resumes
                self.send(&self.shared.status_message(&s), 0);
                self.shared.replan(&h, &s);
                Ok(())
            }
            ClientMessage::SelectModel { model_id } => {
                let backend = self
                    .shared
                    .registry
                    .get(&model_id)
                    .ok_or_else(|| Failure::new(ErrorCode::UnknownModel, format!("unknown model {model_id:?}")))?;
                let h = self.session()?;
                let mut s = h.session.lock();
                s.set_backend(backend);
                // reply with the state at the switch, before background work resumes
                self.send(&self.shared.status_message(&s), 0);
                self.shared.replan(&h, &s);
                Ok(())
            }
            ClientMessage::SetPrompts { slice, prompts } => {
                self.infer_one(move |s| s.set_prompts(slice, prompts).map(|m| (slice, m)))
            }
            ClientMessage::PropagateTo { slice } => self.infer_one(move |s| s.propagate_to(slice).map(|m| (slice, m))),
            ClientMessage::ApplyBbox3d { lo, hi, axis, adjust } => self.apply_box(lo, hi, axis, adjust),
            ClientMessage::PrecomputeStatus => {
                let h = self.session()?;
                let s = h.session.lock();
                self.send(&self.shared.status_message(&s), 0);
                Ok(())
            }
            ClientMessage::Undo => {
                let h = self.session()?;
                let slice = h.session.lock().undo()?;
                self.send(&ServerMessage::Undone { slice }, 0);
                Ok(())
            }
            ClientMessage::ExportLabels { kind, label } => self.export(kind, label),
            ClientMessage::RegisterWorker { model_id, embedding_bytes_estimate } => {
                self.register_worker(model_id, embedding_bytes_estimate)
            }
            ClientMessage::EncodeResult { request_id, outcome } => {
                self.worker_link()?.complete(request_id, WorkerReply::Encoded(outcome));
                Ok(())
            }
            ClientMessage::DecodeResult { request_id, outcome } => {
                self.worker_link()?.complete(request_id, WorkerReply::Decoded(outcome));
                Ok(())
            }
        }
    }

    fn session(&self) -> Result<Arc<SessionHandle>, Failure> {
        self.session
            .clone()
            .ok_or_else(|| Failure::new(ErrorCode::UnknownVolume, "no volume loaded on this connection"))
    }

    fn worker_link(&self) -> Result<&Arc<WorkerLink>, Failure> {
        self.worker
            .as_ref()
            .map(|(_, l)| l)
            .ok_or_else(|| Failure::new(ErrorCode::InvalidRequest, "connection is not a registered worker"))
    }

    /// Runs `f` on the interactive lane and waits for its result.
    fn interactive<R: Send + 'static>(
        &self,
        session_id: u64,
        f: impl FnOnce() -> R + Send + 'static,
    ) -> Result<R, Failure> {
        let (tx, rx) = sync_channel(1);
        let job = Job::Interactive(Box::new(move || {
            let _ = tx.send(f());
        }));
        self.shared
            .queue
            .schedule(TaskKind::InteractiveDecode, session_id, job)
            .ok_or_else(|| Failure::new(ErrorCode::Internal, "server is shutting down"))?;
        rx.recv().map_err(|_| Failure::new(ErrorCode::Internal, "request was dropped"))
    }

    fn infer_one(
        &self,
        op: impl FnOnce(&mut Session) -> Result<(SliceRef, volseg_core::backend::MaskResult), SessionError> + Send + 'static,
    ) -> Result<(), Failure> {
        let h = self.session()?;
        let shared = self.shared.clone();
        let task_handle = h.clone();
        let payload = self.interactive(h.id, move || {
            let mut s = task_handle.session.lock();
            let before = s.current();
            let t0 = s.decode_time_total();
            let (slice, m) = op(&mut s)?;
            let spent = s.decode_time_total() - t0;
            if s.current() != before {
                shared.replan(&task_handle, &s);
            }
            Ok::<_, SessionError>(MaskPayload {
                slice,
                label: s.active_label(),
                score: m.score,
                inference_us: micros(spent),
                mask: rle_encode(&m.bitmap),
            })
        })??;
        self.send(&ServerMessage::MaskResult(payload), 0);
        Ok(())
    }

    fn apply_box(&self, lo: [i32; 3], hi: [i32; 3], axis: Axis, adjust: bool) -> Result<(), Failure> {
        let h = self.session()?;
        let b = Box3D::clamped(lo.map(i64::from), hi.map(i64::from), axis, h.dims)?;
        let task_handle = h.clone();
        let results = self.interactive(h.id, move || {
            let mut s = task_handle.session.lock();
            let t0 = s.decode_time_total();
            let mut out = Vec::new();
            let on_slice = |slice: SliceRef, m: &volseg_core::backend::MaskResult| {
                out.push((slice, m.score, rle_encode(&m.bitmap)));
            };
            let n = if adjust { s.adjust_bbox3d_with(b, on_slice)? } else { s.apply_bbox3d_with(b, on_slice)? };
            let per_slice = (s.decode_time_total() - t0) / n.max(1) as u32;
            let label = s.active_label();
            Ok::<_, SessionError>(
                out.into_iter()
                    .map(|(slice, score, mask)| MaskPayload {
                        slice,
                        label,
                        score,
                        inference_us: micros(per_slice),
                        mask,
                    })
                    .collect::<Vec<_>>(),
            )
        })??;
        let last = results.len().saturating_sub(1);
        for (i, p) in results.into_iter().enumerate() {
            self.send(&ServerMessage::MaskResult(p), if i < last { FLAG_MORE } else { 0 });
        }
        Ok(())
    }

    fn load_volume(&mut self, path: &str) -> Result<(), Failure> {
        if self.worker.is_some() {
            return Err(Failure::new(ErrorCode::InvalidRequest, "worker connections cannot load volumes"));
        }
        let model = &self.shared.config.backend;
        let backend = self.shared.registry.get(model).ok_or_else(|| {
            Failure::new(ErrorCode::UnknownModel, format!("default model {model:?} is not registered"))
        })?;
        let volume = load_volume(path).map_err(|e| Failure::new(ErrorCode::Io, format!("{path}: {e}")))?;
        if let Some(old) = self.session.take() {
            self.shared.close_session(&old);
        }
        let session = Session::new(Arc::new(volume), backend, self.shared.cache.clone());
        let v = session.volume().clone();
        let (lo, hi) = v.intensity_range();
        let wl = session.window_level();
        let meta = VolumeMeta {
            volume_id: v.id().0,
            session_id: session.id().0,
            dims: v.dims().map(|d| d as u32),
            spacing: v.spacing(),
            affine: *v.affine(),
            intensity_min: lo,
            intensity_max: hi,
            window: wl.window(),
            level: wl.level(),
        };
        let handle = Arc::new(SessionHandle::new(session, self.writer.clone()));
        self.shared.sessions.write().insert(handle.id, handle.clone());
        self.session = Some(handle.clone());
        self.send(&ServerMessage::VolumeMeta(meta), 0);
        let s = handle.session.lock();
        self.shared.replan(&handle, &s);
        info!(session = handle.id, path, dims = ?v.dims(), "volume loaded");
        Ok(())
    }

    fn export(&self, kind: ExportKind, label: u16) -> Result<(), Failure> {
        let h = self.session()?;
        let (labels, volume) = {
            let s = h.session.lock();
            (s.labels().clone(), s.volume().clone())
        };
        let data = match kind {
            ExportKind::RawLabels => labels.labels().iter().flat_map(|v| v.to_le_bytes()).collect(),
            ExportKind::Nifti => write_label_volume(&labels, &volume)?,
            ExportKind::Stl => {
                if label == 0 {
                    return Err(Failure::new(ErrorCode::InvalidRequest, "STL export needs a label >= 1"));
                }
                let mesh = extract_surface(&labels, &volume, label)?;
                let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
                write_stl(&mesh, &mut out).map_err(|e| Failure::new(ErrorCode::Io, e.to_string()))?;
                out
            }
        };
        let total_len = data.len() as u64;
        let count = data.len().div_ceil(EXPORT_CHUNK_BYTES).max(1);
        for index in 0..count {
            let start = (index * EXPORT_CHUNK_BYTES).min(data.len());
            let end = (start + EXPORT_CHUNK_BYTES).min(data.len());
            let msg = ServerMessage::ExportChunk {
                kind,
                index: index as u32,
                count: count as u32,
                total_len,
                data: data[start..end].to_vec(),
            };
            self.send(&msg, if index + 1 < count { FLAG_MORE } else { 0 });
        }
        Ok(())
    }

    fn register_worker(&mut self, model_id: String, embedding_bytes_estimate: u64) -> Result<(), Failure> {
        if self.session.is_some() || self.worker.is_some() {
            return Err(Failure::new(ErrorCode::InvalidRequest, "connection is already in use"));
        }
        let link = Arc::new(WorkerLink::new(self.writer.clone(), self.shared.config.worker_timeout()));
        let backend = RemoteBackend::new(model_id.clone(), embedding_bytes_estimate, link.clone());
        self.shared.registry.register(Arc::new(backend)).map_err(|e| match e {
            RegistryError::Duplicate(_) => Failure::new(ErrorCode::DuplicateWorker, e.to_string()),
            RegistryError::EmptyId => Failure::new(ErrorCode::InvalidRequest, e.to_string()),
        })?;
        info!(model = %model_id, "worker registered");
        self.worker = Some((model_id, link));
        self.send(&ServerMessage::WorkerRegistered, 0);
        Ok(())
    }

    fn close(&mut self) {
        if let Some(h) = self.session.take() {
            self.shared.close_session(&h);
        }
        if let Some((model_id, link)) = self.worker.take() {
            self.shared.registry.deregister(&model_id);
            let in_flight = link.in_flight();
            link.fail_all();
            info!(model = %model_id, in_flight, "worker deregistered");
        }
    }
}

fn micros(d: Duration) -> u32 {
    d.as_micros().min(u32::MAX as u128) as u32
}
