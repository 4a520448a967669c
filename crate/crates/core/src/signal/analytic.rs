//! Analytic signal via the frequency-domain Hilbert construction.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::fft::{fft_real, ifft};

/// Complex analytic extension of a real signal.
#[derive(Debug, Clone)]
pub struct AnalyticSignal {
    /// One complex sample per input sample.
    pub values: Vec<Complex64>,
    /// Band-pass edges applied before construction, when any.
    pub source_band: Option<(f64, f64)>,
}

impl AnalyticSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Instantaneous phase in (-pi, pi].
    pub fn phase(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.im.atan2(z.re)).collect()
    }
}

/// Spectrum of the analytic signal: positive bins doubled, DC (and Nyquist
/// for even lengths) kept, negative bins set to exact zero.
pub fn analytic_spectrum(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "analytic signal needs at least 8 samples, got {}",
            x.len()
        )));
    }
    let n = x.len();
    let mut spec = fft_real(x)?;
    let half = n / 2;
    if n % 2 == 0 {
        for v in &mut spec[1..half] {
            *v *= 2.0;
        }
        for v in &mut spec[half + 1..] {
            *v = Complex64::new(0.0, 0.0);
        }
    } else {
        for v in &mut spec[1..=half] {
            *v *= 2.0;
        }
        for v in &mut spec[half + 1..] {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(spec)
}

/// Analytic signal of a real vector. The real part reproduces the input;
/// the imaginary part is its Hilbert transform.
pub fn analytic_signal(x: &[f64]) -> Result<AnalyticSignal> {
    let spec = analytic_spectrum(x)?;
    let values = ifft(&spec)?;
    Ok(AnalyticSignal { values, source_band: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::standard_normal;
    use crate::signal::fir::fir_bandpass;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn cosine_becomes_unit_phasor() {
        let n = 1024;
        let omega = 2.0 * PI * 50.0 / 1024.0;
        let x: Vec<f64> = (0..n).map(|i| (omega * i as f64).cos()).collect();
        let z = analytic_signal(&x).unwrap();
        for i in 100..n - 100 {
            let v = z.values[i];
            assert!((v.norm() - 1.0).abs() < 1e-6, "magnitude at {i}: {}", v.norm());
            assert!((v.re - x[i]).abs() < 1e-9, "real part drifted at {i}");
        }
        // phase advances by omega per sample
        let phase = z.phase();
        for i in 100..n - 100 {
            let mut d = phase[i + 1] - phase[i];
            if d < -PI {
                d += 2.0 * PI;
            }
            assert!((d - omega).abs() < 1e-3, "phase step at {i}: {d}");
        }
    }

    #[test]
    fn sine_lags_cosine_by_quarter_cycle() {
        let n = 1024;
        let omega = 2.0 * PI * 40.0 / 1024.0;
        let c: Vec<f64> = (0..n).map(|i| (omega * i as f64).cos()).collect();
        let s: Vec<f64> = (0..n).map(|i| (omega * i as f64).sin()).collect();
        let zc = analytic_signal(&c).unwrap();
        let zs = analytic_signal(&s).unwrap();
        for i in 100..n - 100 {
            let diff = (zc.values[i] * zs.values[i].conj()).arg();
            assert!((diff - PI / 2.0).abs() < 1e-6, "lag at {i}: {diff}");
        }
    }

    #[test]
    fn negative_frequency_bins_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [64usize, 65] {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let spec = analytic_spectrum(&x).unwrap();
            let first_neg = n / 2 + 1;
            for v in &spec[first_neg..] {
                assert_eq!(v.re, 0.0);
                assert_eq!(v.im, 0.0);
            }
        }
    }

    #[test]
    fn quadrature_is_uncorrelated_with_signal() {
        let n = 4096;
        let fs = 256.0;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let band = fir_bandpass(&noise, fs, 8.0, 30.0, 129).unwrap();
        let z = analytic_signal(&band).unwrap();
        let re: Vec<f64> = z.values.iter().map(|v| v.re).collect();
        let im: Vec<f64> = z.values.iter().map(|v| v.im).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mr, mi) = (mean(&re), mean(&im));
        let mut cov = 0.0;
        let mut vr = 0.0;
        let mut vi = 0.0;
        for i in 0..n {
            cov += (re[i] - mr) * (im[i] - mi);
            vr += (re[i] - mr) * (re[i] - mr);
            vi += (im[i] - mi) * (im[i] - mi);
        }
        let r = cov / (vr.sqrt() * vi.sqrt());
        assert!(r.abs() < 0.05, "lag-0 correlation {r}");
    }

    #[test]
    fn too_short_input_is_rejected() {
        assert!(analytic_signal(&[1.0; 7]).is_err());
    }
}
