pub mod backend;
pub mod cache;
pub mod mask;
pub mod protocol;
pub mod session;
pub mod volume;
