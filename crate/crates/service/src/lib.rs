//! Job service, persistent sessions and command-line interface around the
//! editing pipeline.

pub mod cli;
pub mod http;
pub mod runner;
pub mod store;
