//! Frequency-domain acoustic echo cancellation built on a short-time Wiener
//! solution: per-bin regularized MMSE filter estimation over a causal sliding
//! window, an attention stage that reweights the Wiener statistics to
//! de-emphasize double-talk frames, and the simulation/metric harness needed
//! to exercise the whole thing on synthetic rooms.
//!
//! The crate is organized around the processing chain
//!
//! ```text
//! far, mic ──stft──▶ X, D ──unfold──▶ X[f,t,k] ──stats──▶ (R, r) ──solve──▶ H ──subtract──▶ S
//! ```
//!
//! with an optional attention pass between `unfold` and `solve` that replaces
//! the plain sliding-window statistics with softmax-weighted ones.
//!
//! Everything is `f64`, deterministic for a fixed seed, and independent of the
//! parallel schedule: with the default `parallel` feature the per-bin work is
//! distributed with rayon, without it the same kernels run sequentially, and
//! both produce bit-identical output.

pub mod attention;
pub mod error;
pub mod metrics;
mod par;
pub mod simulate;
pub mod stft;
pub mod surrogate;
pub mod wiener;

pub use error::{Error, Result};
