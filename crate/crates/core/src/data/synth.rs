//! Synthetic two-class EEG with planted spatial structure.
//!
//! Each trial is `X = M S + sigma E`: band-limited noise sources with
//! class-specific variance profiles, mixed by a planted matrix. The
//! returned ground truth lets tests check that spatial filters recover the
//! planted unmixing directions.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EpochSet;
use crate::error::{Error, Result};
use crate::numcore::{sym_eig, Tensor};
use crate::rngutil::standard_normal;
use crate::signal::fir_bandpass;

/// How sources map onto channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixingKind {
    /// Random orthonormal mixing drawn from the seed.
    #[default]
    Orthonormal,
    /// Sources appear directly on their own channel.
    Identity,
}

/// Generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub trials_per_class: usize,
    pub mixing: MixingKind,
    /// Per-source variance for class 0; length must equal `channels`.
    pub profile_class0: Vec<f64>,
    /// Per-source variance for class 1.
    pub profile_class1: Vec<f64>,
    pub noise_sigma: f64,
    /// Source band in Hz.
    pub band: (f64, f64),
    pub seed: u64,
}

impl SynthSpec {
    /// Default profiles: class 0 boosts source 0, class 1 boosts source 1,
    /// everything else at unit variance.
    pub fn default_profiles(channels: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p0 = vec![1.0; channels];
        let mut p1 = vec![1.0; channels];
        if channels >= 1 {
            p0[0] = 4.0;
        }
        if channels >= 2 {
            p1[1] = 4.0;
            p0[1] = 1.0;
            p1[0] = 1.0;
        }
        (p0, p1)
    }

    pub fn new(channels: usize, samples: usize, fs: f64, trials_per_class: usize) -> Self {
        let (p0, p1) = Self::default_profiles(channels);
        SynthSpec {
            channels,
            samples,
            fs,
            trials_per_class,
            mixing: MixingKind::Orthonormal,
            profile_class0: p0,
            profile_class1: p1,
            noise_sigma: 0.1,
            band: (8.0, 30.0),
            seed: 42,
        }
    }
}

/// Planted structure returned alongside the generated set.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Mixing matrix, channels x sources.
    pub mixing: Tensor,
    pub profiles: [Vec<f64>; 2],
}

impl SynthTruth {
    /// Direction a spatial filter must align with to isolate `source`.
    /// For orthonormal mixing this is the corresponding column of M.
    pub fn unmixing_direction(&self, source: usize) -> Vec<f64> {
        self.mixing.column(source)
    }

    /// Source with the largest class-variance ratio, the first CSP
    /// component's target.
    pub fn most_discriminative_source(&self) -> usize {
        let mut best = 0;
        let mut best_ratio = 0.0f64;
        for i in 0..self.profiles[0].len() {
            let r = self.profiles[0][i] / self.profiles[1][i];
            let r = r.max(1.0 / r);
            if r > best_ratio {
                best_ratio = r;
                best = i;
            }
        }
        best
    }
}

/// Random orthonormal matrix: eigenvectors of a seeded random symmetric
/// matrix.
fn random_orthonormal(n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = standard_normal(rng);
            m.set2(i, j, v);
            m.set2(j, i, v);
        }
    }
    Ok(sym_eig(&m)?.vectors)
}

fn filter_taps(samples: usize) -> usize {
    let cap = (samples / 2).max(9);
    let taps = cap.min(129);
    if taps % 2 == 0 {
        taps - 1
    } else {
        taps
    }
}

/// Generates the labeled epoch set plus its ground truth.
pub fn synth_generate(spec: &SynthSpec) -> Result<(EpochSet, SynthTruth)> {
    let d = spec.channels;
    if d == 0 || spec.samples < 32 {
        return Err(Error::InvalidArgument(
            "generator needs at least 1 channel and 32 samples".into(),
        ));
    }
    if spec.profile_class0.len() != d || spec.profile_class1.len() != d {
        return Err(Error::InvalidArgument(format!(
            "variance profiles must have length {d}"
        )));
    }
    if spec.trials_per_class == 0 {
        return Err(Error::InvalidArgument("trials_per_class must be positive".into()));
    }
    if spec
        .profile_class0
        .iter()
        .chain(&spec.profile_class1)
        .any(|&v| !(v.is_finite() && v > 0.0))
    {
        return Err(Error::InvalidArgument("variance profiles must be positive".into()));
    }
    let differing = spec
        .profile_class0
        .iter()
        .zip(&spec.profile_class1)
        .filter(|(a, b)| (*a - *b).abs() > 1e-12)
        .count();
    if differing == 0 {
        log::warn!("class variance profiles are identical; generated data carries no CSP signal");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mixing = match spec.mixing {
        MixingKind::Orthonormal => random_orthonormal(d, &mut rng)?,
        MixingKind::Identity => Tensor::eye(d),
    };
    let taps = filter_taps(spec.samples);

    let t = spec.samples;
    let mut trials = Vec::with_capacity(2 * spec.trials_per_class);
    let mut labels = Vec::with_capacity(2 * spec.trials_per_class);
    for class in 0..2u8 {
        let profile =
            if class == 0 { &spec.profile_class0 } else { &spec.profile_class1 };
        for _ in 0..spec.trials_per_class {
            let mut sources = Tensor::zeros(&[d, t]);
            for (s, &var) in profile.iter().enumerate() {
                let white: Vec<f64> = (0..t).map(|_| standard_normal(&mut rng)).collect();
                let mut band = fir_bandpass(&white, spec.fs, spec.band.0, spec.band.1, taps)?;
                let mean = band.iter().sum::<f64>() / t as f64;
                let std = (band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / t as f64)
                    .sqrt();
                let scale = if std > 0.0 { var.sqrt() / std } else { 0.0 };
                for v in &mut band {
                    *v = (*v - mean) * scale;
                }
                sources.data_mut()[s * t..(s + 1) * t].copy_from_slice(&band);
            }
            let mut trial = mixing.matmul(&sources)?;
            if spec.noise_sigma > 0.0 {
                for v in trial.data_mut() {
                    *v += spec.noise_sigma * standard_normal(&mut rng);
                }
            }
            trials.push(trial);
            labels.push(class);
        }
    }

    let channel_names = (0..d).map(|i| format!("ch{i:02}")).collect();
    let positions = (0..d)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / d as f64;
            (theta.cos(), theta.sin())
        })
        .collect();
    let epochs = EpochSet::new(trials, labels, spec.fs, channel_names, Some(positions))?;
    let truth = SynthTruth {
        mixing,
        profiles: [spec.profile_class0.clone(), spec.profile_class1.clone()],
    };
    Ok((epochs, truth))
}
