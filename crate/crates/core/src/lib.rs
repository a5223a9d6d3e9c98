//! Patch-wise mixed-precision post-training quantisation for a toy vision
//! transformer.
//!
//! The pipeline scores every model component with an empirical-Fisher
//! sensitivity ([`sensitivity`]), searches bit allocations on a
//! size/perturbation Pareto frontier ([`allocator`]), reassigns per-patch
//! activation bits from attention statistics ([`aas`]) and evaluates the
//! result with simulated quantisation ([`quant`], [`vit`]).

pub mod aas;
pub mod allocator;
pub mod cli;
pub mod data;
pub mod error;
pub mod quant;
pub mod sensitivity;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
