use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use tracing::{debug, info, warn};

use volseg_core::backend::{ModelRegistry, SegBackend};
use volseg_core::cache::{precompute_plan, wl_hash, EmbeddingCache, EmbeddingKey};
use volseg_core::protocol::{ServerMessage, FLAG_EVENT};
use volseg_core::session::{embedding_for, Session};
use volseg_core::volume::{SliceRef, Volume, WindowLevel};

use crate::config::ServerConfig;
use crate::conn::serve_connection;
use crate::gateway::Gateway;
use crate::queue::{Lane, TaskKind, TaskQueue};
use crate::worker::ConnWriter;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("cannot listen on {0}: {1}")]
    Bind(String, io::Error),
}

pub(crate) enum Job {
    Interactive(Box<dyn FnOnce() + Send>),
    Precompute(PrecomputeJob),
}

pub(crate) struct PrecomputeJob {
    handle: Arc<SessionHandle>,
    plan: Arc<Plan>,
    slice: SliceRef,
}

/// Everything a precompute task needs, captured when the plan is made so
/// tasks never touch the session lock.
struct Plan {
    generation: u64,
    volume: Arc<Volume>,
    backend: Arc<dyn SegBackend>,
    wl: WindowLevel,
    remaining: AtomicUsize,
}

pub(crate) struct SessionHandle {
    pub id: u64,
    pub dims: [usize; 3],
    pub session: Mutex<Session>,
    generation: AtomicU64,
    events: Arc<ConnWriter>,
    last_event: Mutex<Option<Instant>>,
}

impl SessionHandle {
    pub fn new(session: Session, events: Arc<ConnWriter>) -> Self {
        SessionHandle {
            id: session.id().0,
            dims: session.volume().dims(),
            session: Mutex::new(session),
            generation: AtomicU64::new(0),
            events,
            last_event: Mutex::new(None),
        }
    }
}

pub(crate) struct Shared {
    pub config: ServerConfig,
    pub registry: ModelRegistry,
    pub cache: Arc<EmbeddingCache>,
    pub queue: TaskQueue<Job>,
    pub sessions: RwLock<HashMap<u64, Arc<SessionHandle>>>,
    connections: Mutex<HashMap<u64, Arc<ConnWriter>>>,
    next_conn: AtomicU64,
    stopping: AtomicBool,
}

impl Shared {
    pub fn status_message(&self, s: &Session) -> ServerMessage {
        let v = s.volume();
        let f = self.cache.status(v.id(), s.model_id(), wl_hash(s.window_level()), v.dims());
        ServerMessage::PrecomputeStatus {
            volume_id: v.id().0,
            model_id: s.model_id().to_owned(),
            fractions: f.map(|x| x as f32),
        }
    }

    /// Replaces the session's pending precompute work with a fresh plan
    /// that starts at the current slice and skips cached slices.
    pub fn replan(&self, handle: &Arc<SessionHandle>, s: &Session) {
        let generation = handle.generation.fetch_add(1, Ordering::AcqRel) + 1;
        let id = handle.id;
        self.queue.cancel(|t| t.session_id == id && t.kind == TaskKind::PrecomputeEncode);
        let volume = s.volume().clone();
        let wl = s.window_level();
        let todo: Vec<SliceRef> = precompute_plan(volume.dims(), s.current())
            .into_iter()
            .filter(|&slice| !self.cache.contains(&EmbeddingKey::new(volume.id(), s.model_id(), slice, wl)))
            .collect();
        let plan = Arc::new(Plan {
            generation,
            volume,
            backend: s.backend().clone(),
            wl,
            remaining: AtomicUsize::new(todo.len()),
        });
        for slice in todo {
            let job = PrecomputeJob { handle: handle.clone(), plan: plan.clone(), slice };
            self.queue.schedule(TaskKind::PrecomputeEncode, id, Job::Precompute(job));
        }
    }

    /// Stops all background work for a session and frees its embeddings.
    pub fn close_session(&self, handle: &Arc<SessionHandle>) {
        handle.generation.fetch_add(1, Ordering::AcqRel);
        let id = handle.id;
        self.queue.cancel(|t| t.session_id == id);
        self.sessions.write().remove(&id);
        let volume_id = handle.session.lock().volume().id();
        let dropped = self.cache.invalidate(volume_id, None);
        debug!(session = id, dropped, "session closed");
    }

    fn run_precompute(&self, job: PrecomputeJob) {
        let PrecomputeJob { handle, plan, slice } = job;
        if handle.generation.load(Ordering::Acquire) != plan.generation {
            return;
        }
        if let Err(e) = embedding_for(&self.cache, &plan.volume, plan.backend.as_ref(), plan.wl, slice) {
            debug!(session = handle.id, ?slice, error = %e, "precompute failed");
        }
        let left = plan.remaining.fetch_sub(1, Ordering::AcqRel) - 1;
        self.emit_status(&handle, &plan, left == 0);
    }

    fn emit_status(&self, handle: &SessionHandle, plan: &Plan, force: bool) {
        let mut last = handle.last_event.lock();
        let now = Instant::now();
        if !force && last.is_some_and(|t| now.duration_since(t) < self.config.status_interval()) {
            return;
        }
        if handle.generation.load(Ordering::Acquire) != plan.generation {
            return;
        }
        *last = Some(now);
        let v = &plan.volume;
        let f = self.cache.status(v.id(), plan.backend.model_id(), wl_hash(plan.wl), v.dims());
        let msg = ServerMessage::PrecomputeStatus {
            volume_id: v.id().0,
            model_id: plan.backend.model_id().to_owned(),
            fractions: f.map(|x| x as f32),
        };
        let _ = handle.events.send(&msg, FLAG_EVENT);
    }

    pub(crate) fn add_connection(&self, writer: Arc<ConnWriter>) -> u64 {
        let id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        self.connections.lock().insert(id, writer);
        id
    }

    pub(crate) fn remove_connection(&self, id: u64) {
        self.connections.lock().remove(&id);
    }
}

fn run_lane(shared: Arc<Shared>, lane: Lane) {
    while let Some(d) = shared.queue.next_task(lane) {
        match d.task.payload {
            Job::Interactive(f) => {
                if catch_unwind(AssertUnwindSafe(f)).is_err() {
                    warn!(session = d.task.session_id, "interactive task panicked");
                }
            }
            Job::Precompute(job) => {
                let session = job.handle.id;
                if catch_unwind(AssertUnwindSafe(|| shared.run_precompute(job))).is_err() {
                    warn!(session, "precompute task panicked");
                }
            }
        }
    }
}

/// A running server: the frame listener, the task consumers and the
/// optional HTTP gateway.
pub struct Server {
    shared: Arc<Shared>,
    addr: SocketAddr,
    gateway: Option<Gateway>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Listens on the configured address and ports.
    pub fn start(config: ServerConfig) -> Result<Server, ServerError> {
        config.validate()?;
        let addr = format!("{}:{}", config.bind, config.port);
        let listener = TcpListener::bind(&addr).map_err(|e| ServerError::Bind(addr, e))?;
        let gateway = match config.gateway_port {
            0 => None,
            p => {
                let addr = format!("{}:{}", config.bind, p);
                Some(TcpListener::bind(&addr).map_err(|e| ServerError::Bind(addr, e))?)
            }
        };
        Self::launch(config, listener, gateway)
    }

    /// Listens on OS-assigned localhost ports, ignoring the configured ones.
    /// The gateway runs unless `gateway_port` is 0.
    pub fn start_ephemeral(config: ServerConfig) -> Result<Server, ServerError> {
        let bind = |what: &str| TcpListener::bind("127.0.0.1:0").map_err(|e| ServerError::Bind(what.into(), e));
        let listener = bind("127.0.0.1:0")?;
        let gateway = if config.gateway_port == 0 { None } else { Some(bind("127.0.0.1:0")?) };
        let config = ServerConfig { port: listener.local_addr().map(|a| a.port()).unwrap_or(1), ..config };
        config.validate()?;
        Self::launch(config, listener, gateway)
    }

    fn launch(
        config: ServerConfig,
        listener: TcpListener,
        gateway: Option<TcpListener>,
    ) -> Result<Server, ServerError> {
        let registry = ModelRegistry::new();
        let addr = listener.local_addr().map_err(|e| ServerError::Bind("listener".into(), e))?;
        let shared = Arc::new(Shared {
            cache: Arc::new(EmbeddingCache::new(config.cache_bytes)),
            registry,
            queue: TaskQueue::new(),
            sessions: RwLock::new(HashMap::new()),
            connections: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            stopping: AtomicBool::new(false),
            config,
        });

        let mut threads = Vec::new();
        let spawn = |name: String, f: Box<dyn FnOnce() + Send>| {
            thread::Builder::new().name(name).spawn(f).expect("spawn server thread")
        };
        {
            let shared = shared.clone();
            threads.push(spawn("volseg-interactive".into(), Box::new(move || run_lane(shared, Lane::Interactive))));
        }
        for i in 0..shared.config.workers {
            let shared = shared.clone();
            threads.push(spawn(format!("volseg-pool-{i}"), Box::new(move || run_lane(shared, Lane::Any))));
        }
        {
            let shared = shared.clone();
            threads.push(spawn("volseg-accept".into(), Box::new(move || accept_loop(shared, listener))));
        }
        let gateway = match gateway {
            Some(l) => {
                Some(Gateway::start(shared.clone(), l, addr).map_err(|e| ServerError::Bind("gateway".into(), e))?)
            }
            None => None,
        };
        info!(%addr, gateway = ?gateway.as_ref().map(|g| g.addr()), workers = shared.config.workers, "server listening");
        Ok(Server { shared, addr, gateway, threads })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn gateway_addr(&self) -> Option<SocketAddr> {
        self.gateway.as_ref().map(|g| g.addr())
    }

    pub fn config(&self) -> &ServerConfig {
        &self.shared.config
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.shared.cache
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.shared.registry.list_models().into_iter().map(|d| d.model_id).collect()
    }

    pub fn session_count(&self) -> usize {
        self.shared.sessions.read().len()
    }

    /// Stops accepting, cancels queued work, closes every connection and
    /// joins the server threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.stopping.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        self.shared.queue.close();
        if let Some(g) = self.gateway.take() {
            g.stop();
        }
        for w in self.shared.connections.lock().values() {
            w.shutdown();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        info!(addr = %self.addr, "server stopped");
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::Acquire) {
            break;
        }
        match stream {
            Ok(stream) => {
                let shared = shared.clone();
                let spawned = thread::Builder::new().name("volseg-conn".into()).spawn(move || {
                    serve_connection(shared, stream);
                });
                if let Err(e) = spawned {
                    warn!(error = %e, "cannot spawn connection thread");
                }
            }
            Err(e) => debug!(error = %e, "accept failed"),
        }
    }
}
