//! Editing service over a WebSocket, its JSON wire format, and the `dragedit`
//! command line.

pub mod app;
pub mod cli;
pub mod sessions;
pub mod wire;
