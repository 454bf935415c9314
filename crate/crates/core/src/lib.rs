//! Entire-space post-click conversion-rate estimation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`diffcore`]), a
//! synthetic missing-not-at-random impression generator ([`data`]), the
//! multi-task network with a click-conditioned CVR teacher ([`model`]), every
//! training objective ([`losses`]), evaluation ([`metrics`]) and the training
//! and study drivers ([`trainer`]).

pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
