//! Patchout spectrogram transformer for audio tagging.
//!
//! The crate is organized as a pipeline:
//!
//! - [`frontend`] turns mono 32 kHz audio into log-mel spectrograms and hosts
//!   the waveform-level augmentations (roll, gain, mix-up).
//! - [`tokenizer`] cuts a spectrogram into 16x16 patches, projects them to
//!   embeddings, adds disentangled frequency/time positional encodings, and
//!   applies patchout (training-time token dropping).
//! - [`net`] is the transformer itself: multi-head attention blocks, the
//!   classifier head, a hand-derived backward pass, parameter counting,
//!   depth reduction, and weight serialization.
//! - [`train`] implements the training recipe: importance-weighted epoch
//!   sampling, spectrogram augmentations, BCE loss, AdamW, and the
//!   hold/linear-decay/fine-tune learning-rate schedule.
//! - [`eval`] provides mAP, accuracy, and logit ensembling.
//! - [`bench`] reproduces the attention complexity accounting (analytic
//!   FLOP/byte costs and empirical throughput vs sequence length).
//!
//! Tensors are exchanged on disk in the TENSORBIN container ([`tensorbin`]).

pub mod bench;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod tensorbin;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
