//! Discrete Fourier transform, backed by rustfft (mixed radix, any length).
//!
//! Convention: `fft` is the unnormalized forward DFT, `ifft` divides by N,
//! so `ifft(fft(x)) == x` and Parseval reads `sum|x|^2 == sum|X|^2 / N`.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_finite(x: &[Complex64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("fft of empty input".into()));
    }
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("fft input"));
    }
    Ok(())
}

/// Forward DFT of a complex vector.
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    check_finite(x)?;
    let mut buf = x.to_vec();
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_forward(buf.len());
        plan.process(&mut buf);
    });
    Ok(buf)
}

/// Inverse DFT, scaled by 1/N.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    check_finite(x)?;
    let mut buf = x.to_vec();
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_inverse(buf.len());
        plan.process(&mut buf);
    });
    let scale = 1.0 / buf.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    Ok(buf)
}

/// Forward DFT of a real vector.
pub fn fft_real(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("fft of empty input".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft input"));
    }
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&buf)
}
