//! File formats, dataset generation, training, evaluation and diagnostics
//! for the `umif-core` reconstruction model.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod formats;
pub mod train;
pub mod verify;
pub mod inspect;
