//! Bounded logit attention: self-explaining image classifiers with
//! variable-size explanations, plus the L2X baseline, saliency methods,
//! and a faithfulness evaluation toolkit.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tensor`]), model definitions ([`nn`], [`bla`], [`l2x`]), training and
//! evaluation ([`train`]), datasets ([`data`]), and analysis tooling
//! ([`saliency`], [`faithfulness`], [`stats`]). The `bla` binary exposes
//! the workflows as subcommands ([`cli`]).

pub mod bla;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod faithfulness;
pub mod l2x;
pub mod nn;
pub mod pnm;
pub mod saliency;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
