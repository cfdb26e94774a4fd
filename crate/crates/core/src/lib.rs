//! Task-conditioned hypernetwork LoRA on a small Vision Transformer.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece of
//! the pipeline: a dense tensor type with a reverse-mode tape, a frozen ViT
//! backbone with six LoRA injection points per block, the hypernetwork that
//! regresses per-module LoRA factors from a task embedding and a module
//! positional embedding, the multi-task training loop, masked evaluation
//! (ROC-AUC, bootstrap intervals, decision curves), weight-space analysis
//! (PCA, classical MDS, hierarchical clustering) and the synthetic volumetric
//! data generator.
//!
//! File formats, configuration parsing and the command line live in the
//! `hyperlora` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod hyper;
pub mod linalg;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
