//! Zero-phase FIR band-pass filtering (windowed sinc, forward-backward).

use crate::error::{Error, Result};

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn check_band(fs: f64, low: f64, high: f64, taps: usize) -> Result<()> {
    if !(low > 0.0 && high > low && high < fs / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "band edges must satisfy 0 < low < high < fs/2, got {low}..{high} at fs {fs}"
        )));
    }
    if taps % 2 == 0 || taps < 3 {
        return Err(Error::InvalidArgument(format!("taps must be odd and >= 3, got {taps}")));
    }
    Ok(())
}

/// Hamming-windowed sinc band-pass kernel, normalized to unit gain at the
/// band center.
pub fn design_bandpass(fs: f64, low: f64, high: f64, taps: usize) -> Result<Vec<f64>> {
    check_band(fs, low, high, taps)?;
    let m = (taps - 1) as f64 / 2.0;
    let fl = low / fs;
    let fh = high / fs;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as f64 - m;
            let ideal = 2.0 * fh * sinc(2.0 * fh * n) - 2.0 * fl * sinc(2.0 * fl * n);
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            ideal * w
        })
        .collect();
    // unit gain at the geometric band center
    let fc = 0.5 * (low + high) / fs;
    let omega = 2.0 * std::f64::consts::PI * fc;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &hi) in h.iter().enumerate() {
        re += hi * (omega * i as f64).cos();
        im -= hi * (omega * i as f64).sin();
    }
    let gain = (re * re + im * im).sqrt();
    if gain > 0.0 {
        for v in &mut h {
            *v /= gain;
        }
    }
    Ok(h)
}

/// Same-length convolution with the kernel centered on each sample.
fn convolve_same_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = (h.len() - 1) / 2;
    let mut out = vec![0.0; n];
    for (k, &coeff) in h.iter().enumerate() {
        if coeff == 0.0 {
            continue;
        }
        let shift = k as isize - half as isize;
        let t0 = (-shift).max(0) as usize;
        let t1 = ((n as isize - shift).min(n as isize)) as usize;
        if t0 >= t1 {
            continue;
        }
        let xs = &x[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
        for (o, &v) in out[t0..t1].iter_mut().zip(xs) {
            *o += coeff * v;
        }
    }
    out
}

/// Band-pass filters `x`, applying the kernel forward and backward so the
/// result is zero-phase with an `|H|^2` magnitude response.
pub fn fir_bandpass(x: &[f64], fs: f64, low: f64, high: f64, taps: usize) -> Result<Vec<f64>> {
    let h = design_bandpass(fs, low, high, taps)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fir input"));
    }
    let forward = convolve_same_centered(x, &h);
    let mut rev: Vec<f64> = forward.into_iter().rev().collect();
    rev = convolve_same_centered(&rev, &h);
    rev.reverse();
    Ok(rev)
}
