//! Trace-driven simulator of a secure NVM memory controller: counter-mode
//! encryption, an SGX-style integrity tree with lazy updates, and crash
//! recovery of the metadata cache through ahead writes, LSB sidecars, ADR
//! bitmap lines and a cache-tree over dirty lines.
//!
//! Write-back, strict-persistence and shadow-table (Anubis) baselines share
//! the same engine so write counts and recovery costs are comparable.

pub mod baselines;
pub mod cache;
pub mod crypto;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod nvm;
pub mod recovery;
pub mod sit;
pub mod tracker;

pub use baselines::SchemeId;
pub use error::{Error, Result};
pub use geometry::{Geometry, LineId, LineKind};
pub use sit::{AwMode, CrashSnapshot, Engine, EngineConfig};
