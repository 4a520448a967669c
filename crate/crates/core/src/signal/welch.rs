//! Welch cross-spectral density estimation.
//!
//! Defaults used throughout the crate: Hann window, one-second segments
//! (`seg_len = fs`), 50% overlap.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::fft::fft;

/// Default overlap fraction between segments.
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided Welch cross-spectral density of `x` against `y`.
///
/// Returns `(freqs, Gxy)` with `freqs[k] = k * fs / seg_len` and the usual
/// density scaling (non-DC/Nyquist bins doubled). `welch_csd(x, x, ..)` is
/// the real, nonnegative autospectrum; swapping the arguments conjugates
/// the result exactly.
pub fn welch_csd(
    x: &[f64],
    y: &[f64],
    fs: f64,
    seg_len: usize,
    overlap: f64,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "welch: signal lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if seg_len == 0 || seg_len > x.len() {
        return Err(Error::InvalidArgument(format!(
            "welch: need at least one full segment (seg_len {seg_len}, length {})",
            x.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("welch: overlap {overlap} not in [0,1)")));
    }
    if fs <= 0.0 {
        return Err(Error::InvalidArgument("welch: fs must be positive".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("welch input"));
    }

    let window = hann_window(seg_len);
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let hop = ((seg_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let n_segments = (x.len() - seg_len) / hop + 1;
    let n_bins = seg_len / 2 + 1;

    let mut acc = vec![Complex64::new(0.0, 0.0); n_bins];
    let mut bufx = vec![Complex64::new(0.0, 0.0); seg_len];
    let mut bufy = vec![Complex64::new(0.0, 0.0); seg_len];
    for s in 0..n_segments {
        let start = s * hop;
        for i in 0..seg_len {
            bufx[i] = Complex64::new(x[start + i] * window[i], 0.0);
            bufy[i] = Complex64::new(y[start + i] * window[i], 0.0);
        }
        let sx = fft(&bufx)?;
        let sy = fft(&bufy)?;
        for k in 0..n_bins {
            acc[k] += sx[k] * sy[k].conj();
        }
    }

    let base = 1.0 / (n_segments as f64 * fs * win_power);
    for (k, v) in acc.iter_mut().enumerate() {
        let one_sided = if k == 0 || (seg_len % 2 == 0 && k == seg_len / 2) { 1.0 } else { 2.0 };
        *v *= base * one_sided;
    }
    let freqs = (0..n_bins).map(|k| k as f64 * fs / seg_len as f64).collect();
    Ok((freqs, acc))
}
