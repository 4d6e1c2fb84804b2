//! Wire protocol, client and reference server for driving an out-of-process model.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::{BridgeClient, DEFAULT_TIMEOUT};
pub use protocol::Message;
pub use server::{serve, serve_tcp, ServeOptions, ServeStats};
