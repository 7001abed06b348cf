//! Binary framing, run-length masks and message payloads shared by the
//! server, its clients and model workers.

pub mod frame;
pub mod messages;
pub mod rle;

pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, Decoded, Frame, FrameDecoder, FrameError, ReadError,
    FLAG_EVENT, FLAG_MORE, HEADER_LEN, MAGIC, MAX_PAYLOAD, VERSION,
};
pub use messages::{
    ClientMessage, ErrorCode, ExportKind, MaskPayload, MessageType, ModelInfo, PayloadError, ServerMessage, VolumeMeta,
    WorkerOutcome,
};
pub use rle::{rle_decode, rle_encode, RleError, RleMask};
