//! Channel-pair connectivity estimators and the electrode graph they
//! define.
//!
//! Phase metrics run on the band-passed analytic signal with the first and
//! last `ceil(fs/4)` samples dropped to avoid Hilbert edge transients.
//! Coherence runs on Welch cross-spectra with one-second segments.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::EpochSet;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::signal::{analytic_signal, fir_bandpass, welch_csd, DEFAULT_OVERLAP};

/// Connectivity estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Coh,
    Plv,
    Iplv,
    Pli,
    Dpli,
    Wpli,
    Dwpli,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Coh,
        Estimator::Plv,
        Estimator::Iplv,
        Estimator::Pli,
        Estimator::Dpli,
        Estimator::Wpli,
        Estimator::Dwpli,
    ];

    pub fn is_directed(&self) -> bool {
        matches!(self, Estimator::Dpli)
    }

    /// Self-connectivity value placed on the diagonal.
    pub fn diagonal(&self) -> f64 {
        match self {
            Estimator::Coh | Estimator::Plv => 1.0,
            Estimator::Dpli => 0.5,
            Estimator::Iplv | Estimator::Pli | Estimator::Wpli | Estimator::Dwpli => 0.0,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Estimator::Coh => "coh",
            Estimator::Plv => "plv",
            Estimator::Iplv => "iplv",
            Estimator::Pli => "pli",
            Estimator::Dpli => "dpli",
            Estimator::Wpli => "wpli",
            Estimator::Dwpli => "dwpli",
        };
        f.write_str(name)
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coh" => Ok(Estimator::Coh),
            "plv" => Ok(Estimator::Plv),
            "iplv" => Ok(Estimator::Iplv),
            "pli" => Ok(Estimator::Pli),
            "dpli" => Ok(Estimator::Dpli),
            "wpli" => Ok(Estimator::Wpli),
            "dwpli" => Ok(Estimator::Dwpli),
            other => Err(Error::InvalidArgument(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Shared knobs for connectivity estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectivityConfig {
    /// FIR band-pass taps for the phase metrics (odd).
    pub fir_taps: usize,
    /// Welch segment length in samples; `None` means one second (`fs`).
    pub welch_seg_len: Option<usize>,
    pub welch_overlap: f64,
}

impl Default for ConnectivityConfig {
    fn default() -> Self {
        ConnectivityConfig { fir_taps: 129, welch_seg_len: None, welch_overlap: DEFAULT_OVERLAP }
    }
}

impl ConnectivityConfig {
    /// Shrinks the FIR to fit short trials, keeping it odd.
    fn taps_for(&self, samples: usize) -> usize {
        let mut taps = self.fir_taps.min(samples / 2);
        if taps % 2 == 0 {
            taps = taps.saturating_sub(1);
        }
        taps.max(9)
    }
}

/// Weighted channel-channel adjacency with estimator provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    /// D x D weights in [0, 1]. Symmetric unless `directed`.
    pub adjacency: Tensor,
    pub estimator: Estimator,
    /// Band edges in Hz.
    pub band: (f64, f64),
    pub directed: bool,
}

/// Mean in-band magnitude-squared coherence `|Gxy|^2 / (Gxx Gyy)`,
/// clamped to [0, 1].
pub fn coherence(x: &[f64], y: &[f64], fs: f64, band: (f64, f64)) -> Result<f64> {
    coherence_with(x, y, fs, band, &ConnectivityConfig::default())
}

pub fn coherence_with(
    x: &[f64],
    y: &[f64],
    fs: f64,
    band: (f64, f64),
    cfg: &ConnectivityConfig,
) -> Result<f64> {
    let seg_len = cfg.welch_seg_len.unwrap_or(fs.round() as usize);
    if x.len() < 2 * seg_len {
        return Err(Error::InvalidArgument(format!(
            "coherence needs at least two segments ({} samples), got {}",
            2 * seg_len,
            x.len()
        )));
    }
    let (freqs, gxy) = welch_csd(x, y, fs, seg_len, cfg.welch_overlap)?;
    let (_, gxx) = welch_csd(x, x, fs, seg_len, cfg.welch_overlap)?;
    let (_, gyy) = welch_csd(y, y, fs, seg_len, cfg.welch_overlap)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &f) in freqs.iter().enumerate() {
        if f < band.0 || f > band.1 {
            continue;
        }
        let denom = gxx[k].re * gyy[k].re;
        if denom > 0.0 {
            sum += gxy[k].norm_sqr() / denom;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "band {:?} Hz contains no spectral bins at fs {fs} with segment {seg_len}",
            band
        )));
    }
    Ok((sum / count as f64).clamp(0.0, 1.0))
}

/// Band-passes a signal and returns its trimmed analytic samples.
fn trimmed_analytic(
    x: &[f64],
    fs: f64,
    band: (f64, f64),
    cfg: &ConnectivityConfig,
) -> Result<Vec<Complex64>> {
    let taps = cfg.taps_for(x.len());
    let filtered = fir_bandpass(x, fs, band.0, band.1, taps)?;
    let z = analytic_signal(&filtered)?;
    let trim = (fs / 4.0).ceil() as usize;
    if z.len() <= 2 * trim + 8 {
        return Err(Error::InvalidArgument(format!(
            "signal too short for edge trimming: {} samples, trim {trim} per side",
            z.len()
        )));
    }
    Ok(z.values[trim..z.len() - trim].to_vec())
}

/// Phase statistics of the cross-spectrum sample sequence
/// `S(t) = z_x(t) conj(z_y(t))`.
fn phase_stats(s: &[Complex64], method: Estimator) -> f64 {
    let n = s.len() as f64;
    match method {
        Estimator::Plv | Estimator::Iplv => {
            let mut acc = Complex64::new(0.0, 0.0);
            for v in s {
                let mag = v.norm();
                if mag > 0.0 {
                    acc += v / mag;
                }
            }
            let mean = acc / n;
            if method == Estimator::Plv {
                mean.norm().min(1.0)
            } else {
                mean.im.abs().min(1.0)
            }
        }
        Estimator::Pli => {
            let sum: f64 = s
                .iter()
                .map(|v| {
                    let d = v.im.atan2(v.re);
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .sum();
            (sum / n).abs().min(1.0)
        }
        Estimator::Dpli => {
            let sum: f64 = s
                .iter()
                .map(|v| {
                    let d = v.im.atan2(v.re);
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        0.0
                    } else {
                        0.5
                    }
                })
                .sum();
            (sum / n).clamp(0.0, 1.0)
        }
        Estimator::Wpli => {
            let num: f64 = s.iter().map(|v| v.im).sum();
            let den: f64 = s.iter().map(|v| v.im.abs()).sum();
            if den == 0.0 {
                0.0
            } else {
                (num.abs() / den).min(1.0)
            }
        }
        Estimator::Dwpli => {
            let sum_im: f64 = s.iter().map(|v| v.im).sum();
            let sum_sq: f64 = s.iter().map(|v| v.im * v.im).sum();
            let sum_abs: f64 = s.iter().map(|v| v.im.abs()).sum();
            let den = sum_abs * sum_abs - sum_sq;
            if den <= 0.0 {
                0.0
            } else {
                ((sum_im * sum_im - sum_sq) / den).clamp(0.0, 1.0)
            }
        }
        Estimator::Coh => unreachable!("coherence is not a phase statistic"),
    }
}

/// One phase-synchronization value between two raw signals. For `dpli`
/// the value is directed x -> y: 1 when x consistently leads.
pub fn phase_metric(
    x: &[f64],
    y: &[f64],
    fs: f64,
    band: (f64, f64),
    method: Estimator,
) -> Result<f64> {
    phase_metric_with(x, y, fs, band, method, &ConnectivityConfig::default())
}

pub fn phase_metric_with(
    x: &[f64],
    y: &[f64],
    fs: f64,
    band: (f64, f64),
    method: Estimator,
    cfg: &ConnectivityConfig,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "phase metric: lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if method == Estimator::Coh {
        return coherence_with(x, y, fs, band, cfg);
    }
    let zx = trimmed_analytic(x, fs, band, cfg)?;
    let zy = trimmed_analytic(y, fs, band, cfg)?;
    if zx.iter().all(|v| v.norm_sqr() == 0.0) || zy.iter().all(|v| v.norm_sqr() == 0.0) {
        return Err(Error::InvalidArgument("all-zero band-passed signal".into()));
    }
    let s: Vec<Complex64> = zx.iter().zip(&zy).map(|(a, b)| a * b.conj()).collect();
    Ok(phase_stats(&s, method))
}

/// Per-trial pairwise connectivity averaged over every trial of the set.
pub fn connectivity_matrix(
    epochs: &EpochSet,
    method: Estimator,
    band: (f64, f64),
) -> Result<ConnectivityGraph> {
    connectivity_matrix_with(epochs, method, band, &ConnectivityConfig::default())
}

pub fn connectivity_matrix_with(
    epochs: &EpochSet,
    method: Estimator,
    band: (f64, f64),
    cfg: &ConnectivityConfig,
) -> Result<ConnectivityGraph> {
    let d = epochs.n_channels();
    if d < 2 {
        return Err(Error::InvalidArgument(format!("connectivity needs >= 2 channels, got {d}")));
    }
    if epochs.is_empty() {
        return Err(Error::InvalidArgument("connectivity needs at least one trial".into()));
    }
    let fs = epochs.fs();
    let mut acc = Tensor::zeros(&[d, d]);
    for trial in epochs.trials() {
        if method == Estimator::Coh {
            for i in 0..d {
                for j in (i + 1)..d {
                    let v = coherence_with(trial.row(i), trial.row(j), fs, band, cfg)?;
                    acc.set2(i, j, acc.at2(i, j) + v);
                    acc.set2(j, i, acc.at2(j, i) + v);
                }
            }
        } else {
            // band-pass + Hilbert once per channel, then all pairs
            let analytic: Vec<Vec<Complex64>> = (0..d)
                .map(|ch| trimmed_analytic(trial.row(ch), fs, band, cfg))
                .collect::<Result<_>>()?;
            for i in 0..d {
                for j in (i + 1)..d {
                    let s: Vec<Complex64> = analytic[i]
                        .iter()
                        .zip(&analytic[j])
                        .map(|(a, b)| a * b.conj())
                        .collect();
                    if method == Estimator::Dpli {
                        let n = s.len() as f64;
                        let count: f64 = s
                            .iter()
                            .map(|v| {
                                let ph = v.im.atan2(v.re);
                                if ph > 0.0 {
                                    1.0
                                } else if ph < 0.0 {
                                    0.0
                                } else {
                                    0.5
                                }
                            })
                            .sum();
                        acc.set2(i, j, acc.at2(i, j) + count / n);
                        acc.set2(j, i, acc.at2(j, i) + (n - count) / n);
                    } else {
                        let v = phase_stats(&s, method);
                        acc.set2(i, j, acc.at2(i, j) + v);
                        acc.set2(j, i, acc.at2(j, i) + v);
                    }
                }
            }
        }
    }
    let n_trials = epochs.len() as f64;
    let mut adjacency = acc.scale(1.0 / n_trials);
    for i in 0..d {
        adjacency.set2(i, i, method.diagonal());
    }
    Ok(ConnectivityGraph { adjacency, estimator: method, band, directed: method.is_directed() })
}

/// Row-stochastic neighbor weights for graph convolution.
///
/// Directed dpli is first folded to the symmetric strength `2 |A - 0.5|`.
/// Entries below `threshold` are zeroed, the diagonal is excluded unless
/// `self_loops`, and each row is normalized to sum 1; a node left without
/// neighbors falls back to self-only aggregation.
pub fn graph_normalize(
    graph: &ConnectivityGraph,
    self_loops: bool,
    threshold: f64,
) -> Result<Tensor> {
    let (d, _) = graph.adjacency.dims2()?;
    let mut weights = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let raw = graph.adjacency.at2(i, j);
            let v = if graph.directed { 2.0 * (raw - 0.5).abs() } else { raw };
            let v = if v < threshold { 0.0 } else { v };
            let keep = if i == j { self_loops } else { true };
            if keep {
                weights.set2(i, j, v);
            }
        }
    }
    for i in 0..d {
        let row_sum: f64 = (0..d).map(|j| weights.at2(i, j)).sum();
        if row_sum > 0.0 {
            for j in 0..d {
                weights.set2(i, j, weights.at2(i, j) / row_sum);
            }
        } else {
            weights.set2(i, i, 1.0);
        }
    }
    Ok(weights)
}
