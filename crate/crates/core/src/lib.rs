//! Core of a multi-view voxel reconstruction transformer.
//!
//! Everything in this crate is a pure function of its inputs and needs only
//! `alloc`: the reverse-mode autodiff tape, the token-similarity machinery
//! (inter-view KNN and DPC-KNN clustering, with brute-force oracles), the
//! encoder/decoder model, Dice loss and voxel metrics, and the seeded
//! synthetic shape generator. File formats, training loops and the command
//! line live in the `umif` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod voxel;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
