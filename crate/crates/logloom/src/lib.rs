//! logloom induces deterministic log parsers from raw samples.
//!
//! A language model is consulted once, offline, to discover the shape of a
//! log source: which byte spans are constant, which vary, what the variable
//! fields mean, and how they map onto a shared taxonomy. The result is a
//! plain data structure (a prefix-sharing token tree plus a named schema)
//! that parses the stream byte-exactly with no model anywhere near the hot
//! path.
//!
//! Start with the runnable programs in `examples/`; each one exercises a
//! single capability end to end. The `logloom` binary wraps the same
//! library entry points for shell use.

pub mod error;
pub mod gateway;
pub mod induce;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod naming;
pub mod query;
pub mod pipeline;
pub mod taxonomy;
pub mod validate;

pub use error::{Error, Result};
