//! Video-conditioned manipulation policy on a synthetic desk-scale tabletop.
//!
//! The crate covers the full loop: a deterministic 2-D simulator with paired
//! demonstrations ([`simenv`]), an action quantization scheme
//! ([`actionspace`]), a cross-attention transformer that fuses prompt video
//! and robot state ([`encoders`], [`policy`]), a four-part training loss
//! ([`losses`]), an optimizer loop with checkpointing ([`trainer`]) and a
//! closed-loop evaluation harness ([`evalharness`]).

pub mod actionspace;
pub mod config;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod nn;
pub mod policy;
pub mod simenv;
pub mod trainer;

pub use error::{Error, Result};
