//! HTTP side of the server: `/ws` relays binary frames (one frame per
//! websocket message) to the frame listener, `/slice/...` serves windowed
//! 8-bit PNG tiles, everything else comes from the static directory.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::Deserialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::oneshot;
use tracing::{debug, warn};

use volseg_core::protocol::{decode_frame, Decoded, FrameDecoder, HEADER_LEN, MAX_PAYLOAD};
use volseg_core::volume::{apply_window_level, Axis, SliceRef, WindowLevel};

use crate::server::Shared;

pub(crate) struct Gateway {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

#[derive(Clone)]
struct GatewayState {
    shared: Arc<Shared>,
    frames_addr: SocketAddr,
}

impl Gateway {
    pub fn start(shared: Arc<Shared>, listener: std::net::TcpListener, frames_addr: SocketAddr) -> io::Result<Gateway> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .thread_name("volseg-gateway")
            .enable_all()
            .build()?;
        let static_dir = shared.config.static_dir.clone();
        let state = GatewayState { shared, frames_addr };
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = thread::Builder::new().name("volseg-gateway-main".into()).spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        warn!(error = %e, "gateway listener");
                        return;
                    }
                };
                let app = router(state, static_dir);
                tokio::select! {
                    r = axum::serve(listener, app) => {
                        if let Err(e) = r {
                            warn!(error = %e, "gateway stopped");
                        }
                    }
                    _ = stop_rx => {}
                }
            });
            // upgraded websockets may still be running; do not wait for them
            rt.shutdown_background();
        })?;
        Ok(Gateway { addr, stop: Some(stop_tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn router(state: GatewayState, static_dir: Option<std::path::PathBuf>) -> Router {
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/slice/{session}/{axis}/{index}", get(slice_tile))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<GatewayState>) -> Response {
    ws.max_message_size(HEADER_LEN + MAX_PAYLOAD).on_upgrade(move |socket| relay(socket, state.frames_addr))
}

async fn relay(socket: WebSocket, frames_addr: SocketAddr) {
    let tcp = match tokio::net::TcpStream::connect(frames_addr).await {
        Ok(s) => s,
        Err(e) => {
            warn!(error = %e, "relay cannot reach the frame listener");
            return;
        }
    };
    let _ = tcp.set_nodelay(true);
    let (mut rd, mut wr) = tcp.into_split();
    let (mut sink, mut stream) = socket.split();

    let upstream = async move {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                Message::Binary(bytes) => {
                    // each message must be exactly one frame
                    match decode_frame(&bytes) {
                        Ok(Decoded::Frame(_, used)) if used == bytes.len() => {
                            if wr.write_all(&bytes).await.is_err() {
                                break;
                            }
                        }
                        _ => {
                            debug!("websocket message is not a single frame");
                            break;
                        }
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
        let _ = wr.shutdown().await;
    };

    let downstream = async move {
        let mut decoder = FrameDecoder::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = match rd.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            decoder.push(&buf[..n]);
            loop {
                match decoder.next_frame() {
                    Ok(Some(frame)) => {
                        let Ok(bytes) = frame.encode() else { return };
                        if sink.send(Message::Binary(bytes.into())).await.is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(_) => return,
                }
            }
        }
        let _ = sink.close().await;
    };

    tokio::select! {
        _ = upstream => {}
        _ = downstream => {}
    }
}

#[derive(Debug, Deserialize)]
struct TileQuery {
    window: Option<f64>,
    level: Option<f64>,
}

fn bad(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, msg.into()).into_response()
}

async fn slice_tile(
    State(state): State<GatewayState>,
    Path((session, axis, index)): Path<(u64, u8, usize)>,
    Query(q): Query<TileQuery>,
) -> Response {
    let Some(handle) = state.shared.sessions.read().get(&session).cloned() else {
        return bad(StatusCode::NOT_FOUND, format!("no session {session}"));
    };
    let Some(axis) = Axis::from_index(axis as usize) else {
        return bad(StatusCode::BAD_REQUEST, "axis must be 0, 1 or 2");
    };
    let (volume, current_wl) = {
        let s = handle.session.lock();
        (s.volume().clone(), s.window_level())
    };
    let wl = match (q.window, q.level) {
        (None, None) => current_wl,
        (w, l) => match WindowLevel::new(w.unwrap_or(current_wl.window()), l.unwrap_or(current_wl.level())) {
            Ok(wl) => wl,
            Err(e) => return bad(StatusCode::BAD_REQUEST, e.to_string()),
        },
    };
    let encoded = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, String> {
        let slice = volume.extract_slice(SliceRef::new(axis, index)).map_err(|e| e.to_string())?;
        let tile = slice_png(&apply_window_level(&slice, wl).pixels, slice.rows, slice.cols)?;
        Ok(tile)
    })
    .await;
    match encoded {
        Ok(Ok(png)) => {
            ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png).into_response()
        }
        Ok(Err(e)) => bad(StatusCode::BAD_REQUEST, e),
        Err(e) => bad(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Grayscale PNG, one row per slice row.
pub fn slice_png(pixels: &[f32], rows: usize, cols: usize) -> Result<Vec<u8>, String> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&bytes, cols as u32, rows as u32, ExtendedColorType::L8)
        .map_err(|e| e.to_string())?;
    Ok(out)
}
