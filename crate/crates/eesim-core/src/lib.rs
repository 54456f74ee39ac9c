//! Core model of a sparse 8-bit transformer accelerator with entropy-based
//! early exit, exit-layer prediction, sentence-level DVFS and non-volatile
//! embedding storage.
//!
//! Everything in this crate is deterministic, allocation-only compute: cycle,
//! latency and energy accounting are pure functions of shapes and configs,
//! and all randomness flows through explicit seeds. IO, file formats and the
//! command-line front end live in the companion `eesim` crate.
//!
//! The crate is `no_std` (with `alloc`); float transcendentals come from
//! [`libm`].

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod dvfs;
pub mod earlyexit;
pub mod envm;
pub mod error;
pub mod model;
pub mod numerics;
pub mod simulator;
pub mod sparse;

pub use error::CoreError;
