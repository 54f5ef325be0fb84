//! Object discovery by reconstructing frozen patch features from slots.
//!
//! The pipeline: patch features ([`features`]) are grouped into slots by
//! Slot Attention ([`grouping`]), decoded back into features ([`decoding`]),
//! trained with a reconstruction loss ([`training`]) and evaluated through
//! their masks ([`masks`], [`metrics`], [`eval`]). [`data`] reads datasets
//! and generates synthetic ones.

pub mod autograd;
pub mod data;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod features;
pub mod grouping;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
