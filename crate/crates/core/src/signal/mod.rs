//! Spectral and analytic-signal machinery: FFT, Hilbert analytic signal,
//! Welch cross-spectral density, and zero-phase FIR band-pass filtering.

pub mod analytic;
pub mod fft;
pub mod fir;
pub mod welch;

pub use analytic::{analytic_signal, analytic_spectrum, AnalyticSignal};
pub use fft::{fft, fft_real, ifft};
pub use fir::{design_bandpass, fir_bandpass};
pub use welch::{hann_window, welch_csd, DEFAULT_OVERLAP};
