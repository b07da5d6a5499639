//! Source attribution for synthetic speech.
//!
//! The library covers the full experiment loop: synthesizing corpora of
//! pseudo-speech through simulated acoustic-model/vocoder pipelines,
//! extracting LFCC features, training a small Res2Net-style classifier
//! on residual fingerprints, perturbing audio for robustness studies,
//! and evaluating/reporting results. Everything is deterministic in the
//! experiment seed: same config, same bytes out.

pub mod audio;
pub mod dsp;
pub mod eval;
pub mod exp;
pub mod nn;
pub mod perturb;
pub mod simsource;
pub mod util;
