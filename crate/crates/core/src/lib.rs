//! Core library for probing stain-based shortcut learning at desk scale.
//!
//! Everything numeric lives here: a dense-tensor autodiff engine, the small
//! convolutional dual-head classifier, its losses (supervised stain
//! cross-entropy and label-free stain entropy), a synthetic confounded patch
//! generator with group-aware splitting, a mini-batch training engine, and the
//! evaluation metrics. The crate is `no_std` (with `alloc`); file formats,
//! configuration, and the CLI live in the companion `shortcut-probe` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
