#![allow(dead_code)]

pub mod sched;

use std::path::Path;
use std::sync::Arc;

use volseg_core::backend::{PromptSet, ReferenceBackend};
use volseg_core::cache::EmbeddingCache;
use volseg_core::session::Session;
use volseg_core::volume::{save_volume, Volume};
use volseg_server::{Server, ServerConfig};

pub fn config() -> ServerConfig {
    ServerConfig { gateway_port: 0, workers: 1, ..ServerConfig::default() }
}

pub fn start() -> Server {
    Server::start_ephemeral(config()).unwrap()
}

pub fn save(dir: &Path, name: &str, v: &Volume) -> String {
    let p = dir.join(name);
    save_volume(v, &p).unwrap();
    p.to_str().unwrap().to_owned()
}

pub fn local_session(v: &Volume) -> Session {
    Session::new(Arc::new(v.clone()), Arc::new(ReferenceBackend::new()), Arc::new(EmbeddingCache::new(1 << 30)))
}

pub fn prompts_at(row: u32, col: u32) -> PromptSet {
    PromptSet::points(vec![volseg_core::backend::Point::new(row, col)], vec![])
}
