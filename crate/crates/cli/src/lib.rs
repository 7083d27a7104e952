//! Command-line tool and local HTTP service around `vanish-core`.

pub mod cli;
pub mod request;
pub mod server;
