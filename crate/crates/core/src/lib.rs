//! Emotion-conditioned image generation pipeline: corpus curation with
//! caption guidance, hierarchical low-rank adaptation of a diffusion
//! denoiser, dual-objective training, cluster-driven sampling, and an
//! evaluation harness.
//!
//! Everything runs in f64 on the CPU with seeded determinism; the toy
//! encoder/denoiser profile keeps the full pipeline testable end to end.

pub mod adapters;
pub mod autodiff;
pub mod clients;
pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod params;
pub mod synth;
pub mod taxonomy;
pub mod training;
pub mod unet;
pub mod util;

pub use error::{Error, Result};
pub use taxonomy::{EmotionLabel, OneHotEmotion, Polarity, EMOTION_COUNT};
