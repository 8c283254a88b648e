//! Stateful code-acting agent runtime.
//!
//! A language model writes code cells; the cells run in a persistent
//! embedded Python namespace that also holds injected live objects. The
//! conversation only ever sees descriptors and printed output.

pub mod cli;
pub mod coordination;
pub mod descriptor;
pub mod runtime;
pub mod gateway;
pub mod orchestrator;
pub mod security;
pub mod semantic;
pub mod statebench;
