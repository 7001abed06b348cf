//! Frame-protocol server for interactive volume segmentation: sessions,
//! the interactive/precompute task queue, external model workers and the
//! HTTP gateway.

pub mod client;
pub mod config;
mod conn;
mod gateway;
pub mod queue;
mod server;
pub mod worker;

pub use client::{Client, ClientError};
pub use config::ServerConfig;
pub use conn::{EXPORT_CHUNK_BYTES, SERVER_NAME};
pub use gateway::slice_png;
pub use server::{Server, ServerError};
