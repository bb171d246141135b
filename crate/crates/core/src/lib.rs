pub mod audio;
pub mod error;

pub use error::{Error, Result};
pub mod corpus;
pub mod asi;
pub mod checkpoint;
pub mod registry;
pub mod additive;
pub mod conv_deid;
pub mod metrics;
pub mod cvae;
pub mod adversary;
pub mod transcribe;
pub mod harness;
pub mod config;
pub mod selftest;
