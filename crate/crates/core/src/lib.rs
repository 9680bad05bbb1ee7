//! Engine for evidence-grounded, section-based target safety assessment reports.
//!
//! The crate is `no_std` (with `alloc`). Everything that touches the outside
//! world sits behind a trait so the companion `tsa` crate can supply files,
//! child processes and sockets:
//!
//! * [`evidence::Journal`] persists evidence-store events,
//! * [`state::StateStore`] persists section checkpoints, digests and the
//!   progress journal,
//! * [`rpc::ToolTransport`] carries JSON-RPC frames to tool servers,
//! * [`backend::ModelBackend`] produces model turns,
//! * [`clock::Clock`] supplies timestamps.
//!
//! The pipeline itself ([`orchestrator::Engine`]) runs eight section agents in
//! canonical order, wraps each in pre/post/runtime hooks and checkpoints after
//! every validated section so an interrupted run resumes where it stopped.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod prelude;

pub mod backend;
pub mod clock;
pub mod domain;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod fixture;
pub mod gateway;
pub mod grounding;
pub mod hooks;
pub mod instruction;
pub mod memory;
pub mod orchestrator;
pub mod refinement;
pub mod report;
pub mod rpc;
pub mod state;
pub mod text;
pub mod tools;

pub use error::{Error, ErrorCode, Result};
