//! Core data model and pure computations for asmscribe.

pub mod annotate;
pub mod asm;
pub mod lora;
pub mod metrics;
pub mod stats;
pub mod tasks;
