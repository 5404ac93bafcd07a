//! Lyrics-aware embeddings for musical version identification.
//!
//! The crate takes per-token decoder latents (one matrix per track, stored as
//! WLAT files), adapts them into compact embeddings with a small transformer
//! encoder trained contrastively, and evaluates retrieval with the usual
//! version-identification protocol (best-match chunk similarity, MAP).
//! Reference systems (TF-IDF, averaged latents, random, lyrics oracle) and
//! distance-level fusion with an external audio system are included so every
//! number in a report comes from the same [`retrieval::DistanceMatrix`]
//! currency.

pub mod baselines;
pub mod encoder;
pub mod error;
pub mod feature_store;
pub mod fusion;
pub mod losses;
pub mod real;
pub mod retrieval;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

/// Configure the global worker pool from `WEALY_THREADS`, if set.
///
/// Safe to call more than once; only the first successful call takes effect.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var("WEALY_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
