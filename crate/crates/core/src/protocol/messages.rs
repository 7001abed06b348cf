//! Typed payloads for every message type. Field layouts are documented in
//! `docs/protocol.md`; everything is little-endian, strings are a u16 byte
//! length followed by UTF-8.

use super::frame::Frame;
use super::rle::RleMask;
use crate::backend::{BBox2D, ModelKind, Point, PromptSet};
use crate::volume::{Affine, Axis, SliceRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0x01,
    LoadVolume = 0x02,
    VolumeMeta = 0x03,
    SetWindowLevel = 0x04,
    SelectModel = 0x05,
    ListModels = 0x06,
    SetPrompts = 0x07,
    PropagateTo = 0x08,
    ApplyBbox3d = 0x09,
    MaskResult = 0x0A,
    PrecomputeStatus = 0x0B,
    Undo = 0x0C,
    ExportLabels = 0x0D,
    Error = 0x0E,
    RegisterWorker = 0x10,
    EncodeRequest = 0x11,
    EncodeResult = 0x12,
    DecodeRequest = 0x13,
    DecodeResult = 0x14,
}

impl TryFrom<u8> for MessageType {
    type Error = u8;

    fn try_from(v: u8) -> Result<Self, u8> {
        use MessageType::*;
        Ok(match v {
            0x01 => Hello,
            0x02 => LoadVolume,
            0x03 => VolumeMeta,
            0x04 => SetWindowLevel,
            0x05 => SelectModel,
            0x06 => ListModels,
            0x07 => SetPrompts,
            0x08 => PropagateTo,
            0x09 => ApplyBbox3d,
            0x0A => MaskResult,
            0x0B => PrecomputeStatus,
            0x0C => Undo,
            0x0D => ExportLabels,
            0x0E => Error,
            0x10 => RegisterWorker,
            0x11 => EncodeRequest,
            0x12 => EncodeResult,
            0x13 => DecodeRequest,
            0x14 => DecodeResult,
            other => return Err(other),
        })
    }
}

/// Codes carried by ERROR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Unsupported = 1,
    BadPayload = 2,
    UnknownVolume = 3,
    UnknownModel = 4,
    EmptyUndo = 5,
    DuplicateWorker = 6,
    WorkerLost = 7,
    Io = 8,
    InvalidRequest = 9,
    Internal = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        use ErrorCode::*;
        Some(match v {
            1 => Unsupported,
            2 => BadPayload,
            3 => UnknownVolume,
            4 => UnknownModel,
            5 => EmptyUndo,
            6 => DuplicateWorker,
            7 => WorkerLost,
            8 => Io,
            9 => InvalidRequest,
            10 => Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error("payload truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("string is not valid UTF-8")]
    Utf8,
    #[error("invalid axis {0}")]
    Axis(u8),
    #[error("invalid value for {0}")]
    Invalid(&'static str),
    #[error("message type {0:#04x} is not valid in this direction")]
    Unexpected(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.buf.len() < n {
            return Err(PayloadError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], PayloadError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32, PayloadError> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, PayloadError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, PayloadError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PayloadError::Utf8)
    }

    fn axis(&mut self) -> Result<Axis, PayloadError> {
        let a = self.u8()?;
        Axis::try_from(a).map_err(PayloadError::Axis)
    }

    fn slice_ref(&mut self) -> Result<SliceRef, PayloadError> {
        let axis = self.axis()?;
        Ok(SliceRef::new(axis, self.u32()? as usize))
    }

    fn point(&mut self) -> Result<Point, PayloadError> {
        Ok(Point::new(self.u32()?, self.u32()?))
    }

    fn points(&mut self) -> Result<Vec<Point>, PayloadError> {
        let n = self.u16()? as usize;
        if self.buf.len() < 8 * n {
            return Err(PayloadError::Truncated);
        }
        (0..n).map(|_| self.point()).collect()
    }

    fn prompts(&mut self) -> Result<PromptSet, PayloadError> {
        let positive = self.points()?;
        let negative = self.points()?;
        let bbox = match self.u8()? {
            0 => None,
            1 => Some(BBox2D::new(self.u32()?, self.u32()?, self.u32()?, self.u32()?)),
            _ => return Err(PayloadError::Invalid("bbox flag")),
        };
        Ok(PromptSet { positive, negative, bbox })
    }

    fn rle(&mut self) -> Result<RleMask, PayloadError> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = self.u32()? as usize;
        if self.buf.len() < 4 * n {
            return Err(PayloadError::Truncated);
        }
        let runs = (0..n).map(|_| self.u32()).collect::<Result<_, _>>()?;
        Ok(RleMask { rows, cols, runs })
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(self) -> Result<(), PayloadError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(PayloadError::Trailing(n)),
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn i32(&mut self, v: i32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Strings longer than 65535 bytes are truncated at a char boundary.
    fn string(&mut self, s: &str) -> &mut Self {
        let mut end = s.len().min(u16::MAX as usize);
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        self.u16(end as u16);
        self.buf.extend_from_slice(&s.as_bytes()[..end]);
        self
    }

    fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    fn slice_ref(&mut self, s: SliceRef) -> &mut Self {
        self.u8(s.axis as u8).u32(s.index as u32)
    }

    fn points(&mut self, pts: &[Point]) -> &mut Self {
        self.u16(pts.len() as u16);
        for p in pts {
            self.u32(p.row).u32(p.col);
        }
        self
    }

    fn prompts(&mut self, p: &PromptSet) -> &mut Self {
        self.points(&p.positive).points(&p.negative);
        match p.bbox {
            None => self.u8(0),
            Some(b) => self.u8(1).u32(b.row0).u32(b.col0).u32(b.row1).u32(b.col1),
        }
    }

    fn rle(&mut self, m: &RleMask) -> &mut Self {
        self.u32(m.rows).u32(m.cols).u32(m.runs.len() as u32);
        for &r in &m.runs {
            self.u32(r);
        }
        self
    }

    fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub volume_id: u64,
    pub session_id: u64,
    pub dims: [u32; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub window: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInfo {
    pub model_id: String,
    pub kind: ModelKind,
    pub embedding_bytes_estimate: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExportKind {
    /// Raw u16 labels, x-fastest.
    RawLabels = 0,
    /// Uncompressed uint16 NIfTI-1 file.
    Nifti = 1,
    /// Binary STL of one label's surface.
    Stl = 2,
}

impl ExportKind {
    fn from_u8(v: u8) -> Result<Self, PayloadError> {
        match v {
            0 => Ok(ExportKind::RawLabels),
            1 => Ok(ExportKind::Nifti),
            2 => Ok(ExportKind::Stl),
            _ => Err(PayloadError::Invalid("export kind")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPayload {
    pub slice: SliceRef,
    pub label: u16,
    pub score: f32,
    /// Server-side decode time in microseconds.
    pub inference_us: u32,
    pub mask: RleMask,
}

/// Outcome reported by a worker.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkerOutcome<T> {
    Ok(T),
    Err(String),
}

/// Messages sent to the server, by clients and by model workers.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Hello { name: String },
    LoadVolume { path: String },
    SetWindowLevel { window: f64, level: f64 },
    SelectModel { model_id: String },
    ListModels,
    SetPrompts { slice: SliceRef, prompts: PromptSet },
    PropagateTo { slice: SliceRef },
    ApplyBbox3d { lo: [i32; 3], hi: [i32; 3], axis: Axis, adjust: bool },
    PrecomputeStatus,
    Undo,
    ExportLabels { kind: ExportKind, label: u16 },
    RegisterWorker { model_id: String, embedding_bytes_estimate: u64 },
    EncodeResult { request_id: u64, outcome: WorkerOutcome<Vec<u8>> },
    DecodeResult { request_id: u64, outcome: WorkerOutcome<(f32, RleMask)> },
}

/// Messages sent by the server, to clients and to model workers.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Hello { version: u8, name: String },
    VolumeMeta(VolumeMeta),
    ModelList(Vec<ModelInfo>),
    MaskResult(MaskPayload),
    PrecomputeStatus { volume_id: u64, model_id: String, fractions: [f32; 3] },
    Undone { slice: SliceRef },
    ExportChunk { kind: ExportKind, index: u32, count: u32, total_len: u64, data: Vec<u8> },
    Error { code: u16, detail: String },
    WorkerRegistered,
    EncodeRequest { request_id: u64, rows: u32, cols: u32, pixels: Vec<f32> },
    DecodeRequest { request_id: u64, rows: u32, cols: u32, blob: Vec<u8>, prompts: PromptSet },
}

fn kind_code(k: ModelKind) -> u8 {
    match k {
        ModelKind::Builtin => 0,
        ModelKind::ExternalWorker => 1,
    }
}

impl ClientMessage {
    pub fn msg_type(&self) -> MessageType {
        use ClientMessage as C;
        match self {
            C::Hello { .. } => MessageType::Hello,
            C::LoadVolume { .. } => MessageType::LoadVolume,
            C::SetWindowLevel { .. } => MessageType::SetWindowLevel,
            C::SelectModel { .. } => MessageType::SelectModel,
            C::ListModels => MessageType::ListModels,
            C::SetPrompts { .. } => MessageType::SetPrompts,
            C::PropagateTo { .. } => MessageType::PropagateTo,
            C::ApplyBbox3d { .. } => MessageType::ApplyBbox3d,
            C::PrecomputeStatus => MessageType::PrecomputeStatus,
            C::Undo => MessageType::Undo,
            C::ExportLabels { .. } => MessageType::ExportLabels,
            C::RegisterWorker { .. } => MessageType::RegisterWorker,
            C::EncodeResult { .. } => MessageType::EncodeResult,
            C::DecodeResult { .. } => MessageType::DecodeResult,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        use ClientMessage as C;
        let mut w = Writer::default();
        match self {
            C::Hello { name } => w.string(name),
            C::LoadVolume { path } => w.string(path),
            C::SetWindowLevel { window, level } => w.f64(*window).f64(*level),
            C::SelectModel { model_id } => w.string(model_id),
            C::ListModels | C::PrecomputeStatus | C::Undo => &mut w,
            C::SetPrompts { slice, prompts } => w.slice_ref(*slice).prompts(prompts),
            C::PropagateTo { slice } => w.slice_ref(*slice),
            C::ApplyBbox3d { lo, hi, axis, adjust } => {
                for &v in lo.iter().chain(hi) {
                    w.i32(v);
                }
                w.u8(*axis as u8).u8(*adjust as u8)
            }
            C::ExportLabels { kind, label } => w.u8(*kind as u8).u16(*label),
            C::RegisterWorker { model_id, embedding_bytes_estimate } => {
                w.string(model_id).u64(*embedding_bytes_estimate)
            }
            C::EncodeResult { request_id, outcome } => match outcome {
                WorkerOutcome::Ok(blob) => w.u64(*request_id).u8(0).bytes(blob),
                WorkerOutcome::Err(msg) => w.u64(*request_id).u8(1).string(msg),
            },
            C::DecodeResult { request_id, outcome } => match outcome {
                WorkerOutcome::Ok((score, mask)) => w.u64(*request_id).u8(0).f32(*score).rle(mask),
                WorkerOutcome::Err(msg) => w.u64(*request_id).u8(1).string(msg),
            },
        };
        w.finish()
    }

    pub fn to_frame(&self) -> Frame {
        Frame::new(self.msg_type() as u8, 0, self.encode_payload())
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        use ClientMessage as C;
        let ty = MessageType::try_from(frame.msg_type).map_err(PayloadError::UnknownType)?;
        let mut r = Reader::new(&frame.payload);
        let msg = match ty {
            MessageType::Hello => {
                if frame.payload.is_empty() {
                    C::Hello { name: String::new() }
                } else {
                    C::Hello { name: r.string()? }
                }
            }
            MessageType::LoadVolume => C::LoadVolume { path: r.string()? },
            MessageType::SetWindowLevel => C::SetWindowLevel { window: r.f64()?, level: r.f64()? },
            MessageType::SelectModel => C::SelectModel { model_id: r.string()? },
            MessageType::ListModels => C::ListModels,
            MessageType::SetPrompts => C::SetPrompts { slice: r.slice_ref()?, prompts: r.prompts()? },
            MessageType::PropagateTo => C::PropagateTo { slice: r.slice_ref()? },
            MessageType::ApplyBbox3d => {
                let mut v = [0i32; 6];
                for x in &mut v {
                    *x = r.i32()?;
                }
                let axis = r.axis()?;
                let adjust = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(PayloadError::Invalid("bbox mode")),
                };
                C::ApplyBbox3d { lo: [v[0], v[1], v[2]], hi: [v[3], v[4], v[5]], axis, adjust }
            }
            MessageType::PrecomputeStatus => C::PrecomputeStatus,
            MessageType::Undo => C::Undo,
            MessageType::ExportLabels => C::ExportLabels { kind: ExportKind::from_u8(r.u8()?)?, label: r.u16()? },
            MessageType::RegisterWorker => {
                C::RegisterWorker { model_id: r.string()?, embedding_bytes_estimate: r.u64()? }
            }
            MessageType::EncodeResult => {
                let request_id = r.u64()?;
                let outcome = match r.u8()? {
                    0 => WorkerOutcome::Ok(r.rest().to_vec()),
                    1 => WorkerOutcome::Err(r.string()?),
                    _ => return Err(PayloadError::Invalid("status")),
                };
                C::EncodeResult { request_id, outcome }
            }
            MessageType::DecodeResult => {
                let request_id = r.u64()?;
                let outcome = match r.u8()? {
                    0 => WorkerOutcome::Ok((r.f32()?, r.rle()?)),
                    1 => WorkerOutcome::Err(r.string()?),
                    _ => return Err(PayloadError::Invalid("status")),
                };
                C::DecodeResult { request_id, outcome }
            }
            other => return Err(PayloadError::Unexpected(other as u8)),
        };
        r.finish()?;
        Ok(msg)
    }
}

impl ServerMessage {
    pub fn msg_type(&self) -> MessageType {
        use ServerMessage as S;
        match self {
            S::Hello { .. } => MessageType::Hello,
            S::VolumeMeta(_) => MessageType::VolumeMeta,
            S::ModelList(_) => MessageType::ListModels,
            S::MaskResult(_) => MessageType::MaskResult,
            S::PrecomputeStatus { .. } => MessageType::PrecomputeStatus,
            S::Undone { .. } => MessageType::Undo,
            S::ExportChunk { .. } => MessageType::ExportLabels,
            S::Error { .. } => MessageType::Error,
            S::WorkerRegistered => MessageType::RegisterWorker,
            S::EncodeRequest { .. } => MessageType::EncodeRequest,
            S::DecodeRequest { .. } => MessageType::DecodeRequest,
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error { code: code as u16, detail: detail.into() }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        use ServerMessage as S;
        let mut w = Writer::default();
        match self {
            S::Hello { version, name } => w.u8(*version).string(name),
            S::VolumeMeta(m) => {
                w.u64(m.volume_id).u64(m.session_id);
                for d in m.dims {
                    w.u32(d);
                }
                for s in m.spacing {
                    w.f64(s);
                }
                for v in m.affine.iter().flatten() {
                    w.f64(*v);
                }
                w.f32(m.intensity_min).f32(m.intensity_max).f64(m.window).f64(m.level)
            }
            S::ModelList(models) => {
                w.u16(models.len() as u16);
                for m in models {
                    w.string(&m.model_id).u8(kind_code(m.kind)).u64(m.embedding_bytes_estimate);
                }
                &mut w
            }
            S::MaskResult(m) => w.slice_ref(m.slice).u16(m.label).f32(m.score).u32(m.inference_us).rle(&m.mask),
            S::PrecomputeStatus { volume_id, model_id, fractions } => {
                w.u64(*volume_id).string(model_id);
                for f in fractions {
                    w.f32(*f);
                }
                &mut w
            }
            S::Undone { slice } => w.slice_ref(*slice),
            S::ExportChunk { kind, index, count, total_len, data } => {
                w.u8(*kind as u8).u32(*index).u32(*count).u64(*total_len).bytes(data)
            }
            S::Error { code, detail } => w.u16(*code).string(detail),
            S::WorkerRegistered => &mut w,
            S::EncodeRequest { request_id, rows, cols, pixels } => {
                w.u64(*request_id).u32(*rows).u32(*cols);
                for p in pixels {
                    w.f32(*p);
                }
                &mut w
            }
            S::DecodeRequest { request_id, rows, cols, blob, prompts } => {
                w.u64(*request_id).u32(*rows).u32(*cols).u32(blob.len() as u32).bytes(blob).prompts(prompts)
            }
        };
        w.finish()
    }

    pub fn to_frame(&self, flags: u16) -> Frame {
        Frame::new(self.msg_type() as u8, flags, self.encode_payload())
    }

    pub fn decode(frame: &Frame) -> Result<Self, PayloadError> {
        use ServerMessage as S;
        let ty = MessageType::try_from(frame.msg_type).map_err(PayloadError::UnknownType)?;
        let mut r = Reader::new(&frame.payload);
        let msg = match ty {
            MessageType::Hello => S::Hello { version: r.u8()?, name: r.string()? },
            MessageType::VolumeMeta => {
                let volume_id = r.u64()?;
                let session_id = r.u64()?;
                let dims = [r.u32()?, r.u32()?, r.u32()?];
                let spacing = [r.f64()?, r.f64()?, r.f64()?];
                let mut affine = [[0.0; 4]; 4];
                for v in affine.iter_mut().flatten() {
                    *v = r.f64()?;
                }
                S::VolumeMeta(VolumeMeta {
                    volume_id,
                    session_id,
                    dims,
                    spacing,
                    affine,
                    intensity_min: r.f32()?,
                    intensity_max: r.f32()?,
                    window: r.f64()?,
                    level: r.f64()?,
                })
            }
            MessageType::ListModels => {
                let n = r.u16()?;
                let mut models = Vec::new();
                for _ in 0..n {
                    let model_id = r.string()?;
                    let kind = match r.u8()? {
                        0 => ModelKind::Builtin,
                        1 => ModelKind::ExternalWorker,
                        _ => return Err(PayloadError::Invalid("model kind")),
                    };
                    models.push(ModelInfo { model_id, kind, embedding_bytes_estimate: r.u64()? });
                }
                S::ModelList(models)
            }
            MessageType::MaskResult => S::MaskResult(MaskPayload {
                slice: r.slice_ref()?,
                label: r.u16()?,
                score: r.f32()?,
                inference_us: r.u32()?,
                mask: r.rle()?,
            }),
            MessageType::PrecomputeStatus => S::PrecomputeStatus {
                volume_id: r.u64()?,
                model_id: r.string()?,
                fractions: [r.f32()?, r.f32()?, r.f32()?],
            },
            MessageType::Undo => S::Undone { slice: r.slice_ref()? },
            MessageType::ExportLabels => S::ExportChunk {
                kind: ExportKind::from_u8(r.u8()?)?,
                index: r.u32()?,
                count: r.u32()?,
                total_len: r.u64()?,
                data: r.rest().to_vec(),
            },
            MessageType::Error => S::Error { code: r.u16()?, detail: r.string()? },
            MessageType::RegisterWorker => S::WorkerRegistered,
            MessageType::EncodeRequest => {
                let request_id = r.u64()?;
                let rows = r.u32()?;
                let cols = r.u32()?;
                let n = rows as usize * cols as usize;
                let raw = r.take(n.checked_mul(4).ok_or(PayloadError::Truncated)?)?;
                let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                S::EncodeRequest { request_id, rows, cols, pixels }
            }
            MessageType::DecodeRequest => {
                let request_id = r.u64()?;
                let rows = r.u32()?;
                let cols = r.u32()?;
                let len = r.u32()? as usize;
                let blob = r.take(len)?.to_vec();
                S::DecodeRequest { request_id, rows, cols, blob, prompts: r.prompts()? }
            }
            other => return Err(PayloadError::Unexpected(other as u8)),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Bitmap;
    use crate::protocol::rle::rle_encode;

    fn client_round_trip(m: ClientMessage) {
        assert_eq!(ClientMessage::decode(&m.to_frame()).unwrap(), m);
    }

    fn server_round_trip(m: ServerMessage) {
        assert_eq!(ServerMessage::decode(&m.to_frame(0)).unwrap(), m);
    }

    #[test]
    fn client_messages_round_trip() {
        let prompts = PromptSet {
            positive: vec![Point::new(1, 2)],
            negative: vec![Point::new(3, 4), Point::new(5, 6)],
            bbox: Some(BBox2D::new(0, 0, 9, 9)),
        };
        for m in [
            ClientMessage::Hello { name: "viewer".into() },
            ClientMessage::LoadVolume { path: "/data/brain.nii.gz".into() },
            ClientMessage::SetWindowLevel { window: 400.0, level: 40.0 },
            ClientMessage::SelectModel { model_id: "medsam_vit_b".into() },
            ClientMessage::ListModels,
            ClientMessage::SetPrompts { slice: SliceRef::new(Axis::Coronal, 77), prompts },
            ClientMessage::PropagateTo { slice: SliceRef::new(Axis::Axial, 3) },
            ClientMessage::ApplyBbox3d { lo: [-1, 2, 3], hi: [4, 5, 6], axis: Axis::Sagittal, adjust: true },
            ClientMessage::PrecomputeStatus,
            ClientMessage::Undo,
            ClientMessage::ExportLabels { kind: ExportKind::Stl, label: 2 },
            ClientMessage::RegisterWorker { model_id: "vanilla_vit_b".into(), embedding_bytes_estimate: 1 << 22 },
            ClientMessage::EncodeResult { request_id: 9, outcome: WorkerOutcome::Ok(vec![1, 2, 3]) },
            ClientMessage::EncodeResult { request_id: 9, outcome: WorkerOutcome::Err("oom".into()) },
            ClientMessage::DecodeResult {
                request_id: 10,
                outcome: WorkerOutcome::Ok((0.9, rle_encode(&Bitmap::zeros(2, 2)))),
            },
        ] {
            client_round_trip(m);
        }
    }

    #[test]
    fn server_messages_round_trip() {
        let mut affine = [[0.0; 4]; 4];
        affine[0][0] = -0.9375;
        affine[3][3] = 1.0;
        for m in [
            ServerMessage::Hello { version: 1, name: "volseg".into() },
            ServerMessage::VolumeMeta(VolumeMeta {
                volume_id: 1,
                session_id: 2,
                dims: [256, 256, 130],
                spacing: [0.9375, 0.9375, 1.2],
                affine,
                intensity_min: -1024.0,
                intensity_max: 3071.0,
                window: 4095.0,
                level: 1023.5,
            }),
            ServerMessage::ModelList(vec![ModelInfo {
                model_id: "reference".into(),
                kind: ModelKind::Builtin,
                embedding_bytes_estimate: 100,
            }]),
            ServerMessage::MaskResult(MaskPayload {
                slice: SliceRef::new(Axis::Axial, 5),
                label: 1,
                score: 0.25,
                inference_us: 900,
                mask: RleMask { rows: 1, cols: 3, runs: vec![1, 2] },
            }),
            ServerMessage::PrecomputeStatus { volume_id: 3, model_id: "reference".into(), fractions: [0.0, 0.5, 1.0] },
            ServerMessage::Undone { slice: SliceRef::new(Axis::Sagittal, 0) },
            ServerMessage::ExportChunk { kind: ExportKind::Nifti, index: 0, count: 2, total_len: 10, data: vec![7; 5] },
            ServerMessage::error(ErrorCode::EmptyUndo, "nothing to undo"),
            ServerMessage::WorkerRegistered,
            ServerMessage::EncodeRequest { request_id: 4, rows: 1, cols: 2, pixels: vec![0.0, 1.0] },
            ServerMessage::DecodeRequest {
                request_id: 5,
                rows: 4,
                cols: 4,
                blob: vec![9; 3],
                prompts: PromptSet::bbox(BBox2D::new(0, 0, 1, 1)),
            },
        ] {
            server_round_trip(m);
        }
    }

    #[test]
    fn rejects_malformed_payloads() {
        let f = Frame::new(MessageType::SetPrompts as u8, 0, vec![2, 0, 0]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::Truncated));
        let f = Frame::new(MessageType::PropagateTo as u8, 0, vec![7, 0, 0, 0, 0]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::Axis(7)));
        let f = Frame::new(MessageType::Undo as u8, 0, vec![1]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::Trailing(1)));
        let f = Frame::new(0x0F, 0, vec![]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::UnknownType(0x0F)));
        let f = Frame::new(MessageType::MaskResult as u8, 0, vec![]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::Unexpected(0x0A)));
        // a huge declared point count must not allocate
        let f = Frame::new(MessageType::SetPrompts as u8, 0, vec![2, 0, 0, 0, 0, 0xff, 0xff]);
        assert_eq!(ClientMessage::decode(&f), Err(PayloadError::Truncated));
    }

    #[test]
    fn compact_mask_result() {
        let mut bits = vec![false; 256 * 256];
        for r in 100..131 {
            for c in 50..80 {
                bits[r * 256 + c] = true;
            }
        }
        let mask = rle_encode(&Bitmap::from_bits(256, 256, bits));
        assert!(mask.runs.len() <= 64);
        let m = ServerMessage::MaskResult(MaskPayload {
            slice: SliceRef::new(Axis::Axial, 0),
            label: 1,
            score: 1.0,
            inference_us: 0,
            mask,
        });
        assert!(m.to_frame(0).encode().unwrap().len() < 600);
    }
}
