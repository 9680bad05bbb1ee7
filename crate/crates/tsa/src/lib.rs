//! Files, processes, sockets and the command line around `tsa_core`.
//!
//! An assessment lives in one directory (see [`store`]); [`runner::Session`]
//! wires the core engine to it, [`service`] exposes it over HTTP.

pub mod config;
pub mod live;
pub mod runner;
pub mod scripted;
pub mod service;
pub mod store;
pub mod transport;
