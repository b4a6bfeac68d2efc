//! Off-policy group-relative policy optimization on a synthetic
//! audio-visual counting task.
//!
//! The crate is organised bottom-up: [`types`] and [`synthenv`] define the
//! data, [`rewards`] and [`advantage`] turn rollouts into learning signal,
//! [`policy`] is a linear softmax model with exact gradients, [`replay`]
//! keeps a difficulty-stratified buffer, and [`trainer`] ties them together.

pub mod advantage;
pub mod experiments;
pub mod policy;
pub mod replay;
pub mod rewards;
pub mod synthenv;
pub mod trainer;
pub mod types;

pub use types::*;
