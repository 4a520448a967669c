//! DeepCSP: common spatial patterns as a differentiable training loss.
//!
//! The crate implements the full pipeline for two-class motor-imagery EEG
//! decoding on raw trials:
//!
//! - [`numcore`] — dense tensors, symmetric/generalized eigendecomposition
//!   (cyclic Jacobi plus the whitening route), and a minimal reverse-mode
//!   differentiation tape.
//! - [`signal`] — FFT, analytic signal, Welch cross-spectra, zero-phase
//!   FIR band-pass.
//! - [`csp`] — classical CSP and the DeepCSP loss with its analytic
//!   gradient through the generalized eigenvalues.
//! - [`connectivity`] — coherence and the phase-synchronization family
//!   (PLV, iPLV, PLI, dPLI, wPLI, dwPLI) plus graph normalization.
//! - [`models`] — the shallow multi-scale temporal CNN and its
//!   GraphSage-fused variant, with the DeepCSP projection head and a
//!   two-layer classifier.
//! - [`training`] — the two-optimizer protocol (feature extractor driven
//!   by the DeepCSP loss, classifier by cross-entropy), evaluation, and
//!   figure-style exports.
//! - [`data`] — the EEGE epoch file format, splits, and the synthetic
//!   generator used as ground truth in tests.

pub mod connectivity;
pub mod csp;
pub mod data;
pub mod error;
pub mod models;
pub mod numcore;
mod rngutil;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
