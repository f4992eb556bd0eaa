//! Core algorithms for speech-only validation-timing detection.
//!
//! Everything in this crate is pure computation over in-memory data: no file
//! formats, no threads, no clocks. The processing chain it implements is
//!
//! ```text
//! waveform -> MFCC frames -> k-means units      (dsp, units)
//! waveform -> conv downsampler -> transformer   (encoder, tape)
//!          -> masked-unit SSL loss              (ssl)
//!          -> emotion/sentiment multi-task loss (emotion)
//! two encoders -> projection -> fusion -> validate/non-validate logits (fusion)
//! ```
//!
//! plus the shared optimization loop (`train`), classification metrics
//! (`metrics`) and the deterministic synthetic-speech renderer (`synth`) the
//! pipeline is exercised on. The companion `valtime` crate adds WAV and
//! checkpoint formats, corpus generation on disk, and the CLI.
//!
//! The crate is `no_std` (with `alloc`); all float math goes through `libm`
//! and all randomness through explicitly seeded ChaCha streams, so results
//! are reproducible bit-for-bit across runs and platforms.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dsp;
pub mod emotion;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tape;
pub mod train;
pub mod units;

pub use error::Error;
pub use rand_chacha::ChaCha8Rng;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
