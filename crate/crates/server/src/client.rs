//! Blocking client for the frame protocol, plus a loop for writing model
//! workers against it.

use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use volseg_core::backend::PromptSet;
use volseg_core::protocol::{
    read_frame, write_frame, ClientMessage, ExportKind, Frame, FrameError, MaskPayload, ModelInfo, PayloadError,
    ReadError, RleMask, ServerMessage, VolumeMeta, WorkerOutcome,
};
use volseg_core::volume::{Axis, SliceRef};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error("server error {code}: {detail}")]
    Server { code: u16, detail: String },
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error("connection closed")]
    Closed,
}

impl From<ReadError> for ClientError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Frame(e) => ClientError::Frame(e),
            ReadError::Io(e) => ClientError::Io(e),
        }
    }
}

impl ClientError {
    /// The ERROR code, if the server sent one.
    pub fn code(&self) -> Option<u16> {
        match self {
            ClientError::Server { code, .. } => Some(*code),
            _ => None,
        }
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    events: Vec<ServerMessage>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Client { reader: BufReader::with_capacity(1 << 16, stream), writer, events: Vec::new() })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(t)
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<(), ClientError> {
        self.send_frame(&msg.to_frame())
    }

    pub fn send_frame(&mut self, frame: &Frame) -> Result<(), ClientError> {
        write_frame(&mut self.writer, frame)?;
        Ok(())
    }

    /// Next frame of any kind, events included.
    pub fn recv_frame(&mut self) -> Result<Frame, ClientError> {
        read_frame(&mut self.reader)?.ok_or(ClientError::Closed)
    }

    /// Next response frame. Unsolicited events are kept for [`Client::take_events`].
    pub fn recv(&mut self) -> Result<(ServerMessage, bool), ClientError> {
        loop {
            let frame = self.recv_frame()?;
            let msg = ServerMessage::decode(&frame)?;
            if frame.is_event() {
                self.events.push(msg);
                continue;
            }
            return Ok((msg, frame.has_more()));
        }
    }

    /// Sends a request and collects its whole response. An ERROR frame
    /// becomes `ClientError::Server`.
    pub fn request(&mut self, msg: &ClientMessage) -> Result<Vec<ServerMessage>, ClientError> {
        self.send(msg)?;
        let mut out = Vec::new();
        loop {
            let (reply, more) = self.recv()?;
            if let ServerMessage::Error { code, detail } = reply {
                return Err(ClientError::Server { code, detail });
            }
            out.push(reply);
            if !more {
                return Ok(out);
            }
        }
    }

    pub fn request_one(&mut self, msg: &ClientMessage) -> Result<ServerMessage, ClientError> {
        let mut all = self.request(msg)?;
        if all.len() != 1 {
            return Err(ClientError::Unexpected(format!("{} frames", all.len())));
        }
        Ok(all.remove(0))
    }

    pub fn take_events(&mut self) -> Vec<ServerMessage> {
        std::mem::take(&mut self.events)
    }

    pub fn hello(&mut self, name: &str) -> Result<(u8, String), ClientError> {
        match self.request_one(&ClientMessage::Hello { name: name.into() })? {
            ServerMessage::Hello { version, name } => Ok((version, name)),
            other => Err(unexpected(other)),
        }
    }

    pub fn load_volume(&mut self, path: &str) -> Result<VolumeMeta, ClientError> {
        match self.request_one(&ClientMessage::LoadVolume { path: path.into() })? {
            ServerMessage::VolumeMeta(m) => Ok(m),
            other => Err(unexpected(other)),
        }
    }

    pub fn list_models(&mut self) -> Result<Vec<ModelInfo>, ClientError> {
        match self.request_one(&ClientMessage::ListModels)? {
            ServerMessage::ModelList(m) => Ok(m),
            other => Err(unexpected(other)),
        }
    }

    pub fn select_model(&mut self, model_id: &str) -> Result<[f32; 3], ClientError> {
        let reply = self.request_one(&ClientMessage::SelectModel { model_id: model_id.into() })?;
        status_fractions(reply)
    }

    pub fn set_window_level(&mut self, window: f64, level: f64) -> Result<[f32; 3], ClientError> {
        status_fractions(self.request_one(&ClientMessage::SetWindowLevel { window, level })?)
    }

    pub fn precompute_status(&mut self) -> Result<[f32; 3], ClientError> {
        status_fractions(self.request_one(&ClientMessage::PrecomputeStatus)?)
    }

    /// Polls until every axis is fully precomputed.
    pub fn wait_precomputed(&mut self, timeout: Duration) -> Result<bool, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.precompute_status()?.iter().all(|&f| f >= 1.0) {
                return Ok(true);
            }
            if Instant::now() > deadline {
                return Ok(false);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn set_prompts(&mut self, slice: SliceRef, prompts: PromptSet) -> Result<MaskPayload, ClientError> {
        mask(self.request_one(&ClientMessage::SetPrompts { slice, prompts })?)
    }

    pub fn propagate_to(&mut self, slice: SliceRef) -> Result<MaskPayload, ClientError> {
        mask(self.request_one(&ClientMessage::PropagateTo { slice })?)
    }

    pub fn apply_bbox3d(
        &mut self,
        lo: [i32; 3],
        hi: [i32; 3],
        axis: Axis,
        adjust: bool,
    ) -> Result<Vec<MaskPayload>, ClientError> {
        self.request(&ClientMessage::ApplyBbox3d { lo, hi, axis, adjust })?.into_iter().map(mask).collect()
    }

    pub fn undo(&mut self) -> Result<SliceRef, ClientError> {
        match self.request_one(&ClientMessage::Undo)? {
            ServerMessage::Undone { slice } => Ok(slice),
            other => Err(unexpected(other)),
        }
    }

    /// Reassembles an export from its chunks.
    pub fn export(&mut self, kind: ExportKind, label: u16) -> Result<Vec<u8>, ClientError> {
        let mut data = Vec::new();
        let mut expected = None;
        for (i, reply) in self.request(&ClientMessage::ExportLabels { kind, label })?.into_iter().enumerate() {
            match reply {
                ServerMessage::ExportChunk { index, total_len, data: chunk, .. } if index as usize == i => {
                    expected = Some(total_len);
                    data.extend_from_slice(&chunk);
                }
                other => return Err(unexpected(other)),
            }
        }
        if expected != Some(data.len() as u64) {
            return Err(ClientError::Unexpected(format!("export length {} vs {:?}", data.len(), expected)));
        }
        Ok(data)
    }
}

fn unexpected(m: ServerMessage) -> ClientError {
    ClientError::Unexpected(format!("{:?}", m.msg_type()))
}

fn mask(m: ServerMessage) -> Result<MaskPayload, ClientError> {
    match m {
        ServerMessage::MaskResult(p) => Ok(p),
        other => Err(unexpected(other)),
    }
}

fn status_fractions(m: ServerMessage) -> Result<[f32; 3], ClientError> {
    match m {
        ServerMessage::PrecomputeStatus { fractions, .. } => Ok(fractions),
        other => Err(unexpected(other)),
    }
}

/// A request the server routes to a worker.
#[derive(Debug)]
pub enum WorkerRequest {
    Encode { rows: u32, cols: u32, pixels: Vec<f32> },
    Decode { rows: u32, cols: u32, blob: Vec<u8>, prompts: PromptSet },
}

pub enum WorkerResponse {
    Encoded(WorkerOutcome<Vec<u8>>),
    Decoded(WorkerOutcome<(f32, RleMask)>),
}

/// Registers `model_id` and answers requests with `handler` until the
/// server closes the connection.
pub fn run_worker(
    addr: impl ToSocketAddrs,
    model_id: &str,
    embedding_bytes_estimate: u64,
    mut handler: impl FnMut(WorkerRequest) -> WorkerResponse,
) -> Result<(), ClientError> {
    let mut c = register_worker(addr, model_id, embedding_bytes_estimate)?;
    serve_worker(&mut c, &mut handler)
}

/// Connects and registers; the returned client is ready for [`serve_worker`].
pub fn register_worker(
    addr: impl ToSocketAddrs,
    model_id: &str,
    embedding_bytes_estimate: u64,
) -> Result<Client, ClientError> {
    let mut c = Client::connect(addr)?;
    match c.request_one(&ClientMessage::RegisterWorker { model_id: model_id.into(), embedding_bytes_estimate })? {
        ServerMessage::WorkerRegistered => Ok(c),
        other => Err(unexpected(other)),
    }
}

pub fn serve_worker(
    c: &mut Client,
    handler: &mut impl FnMut(WorkerRequest) -> WorkerResponse,
) -> Result<(), ClientError> {
    loop {
        let msg = match c.recv() {
            Ok((msg, _)) => msg,
            Err(ClientError::Closed) => return Ok(()),
            Err(ClientError::Io(e)) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(()),
            Err(e) => return Err(e),
        };
        let (request_id, request) = match msg {
            ServerMessage::EncodeRequest { request_id, rows, cols, pixels } => {
                (request_id, WorkerRequest::Encode { rows, cols, pixels })
            }
            ServerMessage::DecodeRequest { request_id, rows, cols, blob, prompts } => {
                (request_id, WorkerRequest::Decode { rows, cols, blob, prompts })
            }
            other => return Err(unexpected(other)),
        };
        let reply = match handler(request) {
            WorkerResponse::Encoded(outcome) => ClientMessage::EncodeResult { request_id, outcome },
            WorkerResponse::Decoded(outcome) => ClientMessage::DecodeResult { request_id, outcome },
        };
        c.send(&reply)?;
    }
}
