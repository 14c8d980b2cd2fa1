//! Pitch-aware stateless transducer for tonal-phoneme mispronunciation
//! detection and diagnosis (MDD).
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`signal`]: waveform handling, interval-based F0 estimation and the
//!   mel-scale / min-max / coarse quantization chain for pitch,
//! - [`lexicon`]: initial-final-tone phoneme representation and vocabularies,
//! - [`autodiff`]: a minimal reverse-mode tape over dense `f64` tensors,
//! - [`model`]: the pitch-aware encoder, stateless decoder and joint network,
//! - [`rnnt`]: exact transducer loss, a brute-force alignment oracle and
//!   greedy decoding,
//! - [`eval`]: sequence alignment, the TA/FR/FA/TR taxonomy, CD/DE diagnosis
//!   split and derived rates,
//! - [`synth`]: a synthetic tonal-language corpus generator,
//! - [`train`]: a deterministic single-worker training loop.
//!
//! Per-utterance batch operations (pitch extraction, decoding, evaluation,
//! corpus rendering) run data-parallel when the default `parallel` feature is
//! enabled and fall back to plain sequential iteration otherwise.

pub mod autodiff;
pub mod eval;
pub mod lexicon;
pub mod model;
pub mod pipeline;
pub mod rnnt;
pub mod signal;
pub mod synth;
pub mod train;
pub mod util;
