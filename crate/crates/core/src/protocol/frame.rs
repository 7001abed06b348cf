use std::io::{self, Read, Write};

pub const MAGIC: [u8; 4] = *b"SMME";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: usize = 64 << 20;

/// Unsolicited server event, may appear between any two responses.
pub const FLAG_EVENT: u16 = 1 << 0;
/// More frames belonging to the same response follow.
pub const FLAG_MORE: u16 = 1 << 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB cap")]
    Oversized(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub flags: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, flags: u16, payload: Vec<u8>) -> Self {
        Frame { msg_type, flags, payload }
    }

    pub fn is_event(&self) -> bool {
        self.flags & FLAG_EVENT != 0
    }

    pub fn has_more(&self) -> bool {
        self.flags & FLAG_MORE != 0
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self.msg_type, self.flags, &self.payload)
    }
}

/// Outcome of decoding from the front of a buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of bytes it occupied.
    Frame(Frame, usize),
    /// The buffer holds a valid prefix; at least this many bytes are needed in total.
    Incomplete(usize),
}

pub fn encode_frame(msg_type: u8, flags: u16, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversized(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header(msg_type, flags, payload.len()));
    out.extend_from_slice(payload);
    Ok(out)
}

fn header(msg_type: u8, flags: u16, len: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = VERSION;
    h[5] = msg_type;
    h[6..8].copy_from_slice(&flags.to_le_bytes());
    h[8..12].copy_from_slice(&(len as u32).to_le_bytes());
    h
}

/// Validates a complete 12-byte header, returning `(msg_type, flags, payload_len)`.
fn parse_header(h: &[u8]) -> Result<(u8, u16, usize), FrameError> {
    if h[..4] != MAGIC {
        return Err(FrameError::BadMagic(h[..4].to_vec()));
    }
    if h[4] != VERSION {
        return Err(FrameError::UnsupportedVersion(h[4]));
    }
    let len = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversized(len));
    }
    Ok((h[5], u16::from_le_bytes([h[6], h[7]]), len))
}

pub fn decode_frame(buf: &[u8]) -> Result<Decoded, FrameError> {
    if buf.len() < HEADER_LEN {
        let n = buf.len().min(4);
        if buf[..n] != MAGIC[..n] {
            return Err(FrameError::BadMagic(buf[..n].to_vec()));
        }
        if buf.len() > 4 && buf[4] != VERSION {
            return Err(FrameError::UnsupportedVersion(buf[4]));
        }
        return Ok(Decoded::Incomplete(HEADER_LEN));
    }
    let (msg_type, flags, len) = parse_header(&buf[..HEADER_LEN])?;
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Ok(Decoded::Incomplete(total));
    }
    Ok(Decoded::Frame(Frame { msg_type, flags, payload: buf[HEADER_LEN..total].to_vec() }, total))
}

/// Incremental decoder over an arbitrary byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed. After an
    /// error the stream is unrecoverable and should be closed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        match decode_frame(&self.buf)? {
            Decoded::Frame(frame, used) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Decoded::Incomplete(_) => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one frame. `Ok(None)` on a clean end of stream at a frame boundary.
/// The header is validated before the payload is allocated.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, ReadError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (msg_type, flags, len) = parse_header(&h)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame { msg_type, flags, payload }))
}

/// Writes header and payload with a single `write_all`.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), ReadError> {
    let bytes = frame.encode()?;
    w.write_all(&bytes)?;
    Ok(())
}
