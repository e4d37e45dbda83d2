//! Spike-triggered non-autoregressive transformer for sequence transduction.
//!
//! A CTC projection head on top of a transformer encoder produces spike-like
//! label posteriors. Frames whose non-blank probability clears a threshold
//! are *triggered*; their count is the predicted output length and their
//! encoder states are the decoder inputs. The decoder then predicts every
//! output position in a single parallel pass.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: the tensor/autodiff engine, transformer layers, the CTC loss
//! and trigger, the full model, the joint training objective, decoding with
//! optional language-model fusion, and evaluation metrics. File formats,
//! wall-clock timing and the command-line driver live in the `stnat` crate.
//!
//! Numerics are generic over [`Real`]: `f32` for training and decoding,
//! `f64` for finite-difference gradient checks.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adam;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod infer;
mod kernels;
pub mod layers;
pub mod lm;
pub mod network;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use ctc::{PosteriorGrid, TriggerSet};
pub use data::{FeatureMatrix, SpecialTokens, Utterance, Vocab};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use infer::{beam_decode, beam_search, greedy_decode, Decoded, Hypothesis};
pub use lm::{LanguageModel, LmConfig};
pub use network::{DecoderMode, Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
pub use train::{TrainConfig, Trainer};

/// Character-id sequence.
pub type TokenSequence = alloc::vec::Vec<usize>;
