//! Visual question answering with jointly generated answers and textual
//! explanations, tied together by an adversarially trained correlated module.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: reverse-mode differentiation tape, LSTM cell, optimizers.
//! * [`encoder`]: question LSTM and the attention fusion producing `g_f` and `alpha`.
//! * [`generator`]: answer head and the answer-conditioned explanation decoder.
//! * [`correlated`]: discriminator variants and the adversarial training loop.
//! * [`data`]: deterministic synthetic grid-world VQA dataset.
//! * [`perturb`]: inference-time perturbations and repeated-sampling sweeps.
//! * [`metrics`]: BLEU, ROUGE-L, CIDEr, exact-match METEOR, rank correlation,
//!   Friedman/Nemenyi.
//! * [`eval`]: scoring a model on a dataset.
//! * [`reports`]: CSV emitters and readers.
//! * [`config`]: the flat run configuration used by the CLI.

pub mod autodiff;
pub mod config;
pub mod correlated;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod params;
pub mod perturb;
pub mod reports;

pub use error::Error;
