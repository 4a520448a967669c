//! Epoch container, file format, train/test splitting, and the synthetic
//! two-class EEG generator used as the repository's ground-truth oracle.

pub mod format;
pub mod synth;

pub use format::{read_epochs, read_epochs_bytes, write_epochs, write_epochs_bytes};
pub use synth::{synth_generate, MixingKind, SynthSpec, SynthTruth};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Labeled collection of fixed-shape EEG trials.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    trials: Vec<Tensor>,
    labels: Vec<u8>,
    fs: f64,
    channel_names: Vec<String>,
    channel_positions: Option<Vec<(f64, f64)>>,
}

impl EpochSet {
    /// Builds a set, enforcing uniform trial shapes, binary labels, and a
    /// positive sampling rate.
    pub fn new(
        trials: Vec<Tensor>,
        labels: Vec<u8>,
        fs: f64,
        channel_names: Vec<String>,
        channel_positions: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        if trials.len() != labels.len() {
            return Err(Error::Inconsistent(format!(
                "{} trials but {} labels",
                trials.len(),
                labels.len()
            )));
        }
        if fs <= 0.0 || !fs.is_finite() {
            return Err(Error::InvalidArgument(format!("sampling rate {fs} must be positive")));
        }
        let d = channel_names.len();
        for (i, trial) in trials.iter().enumerate() {
            let (rows, _) = trial.dims2()?;
            if rows != d {
                return Err(Error::Inconsistent(format!(
                    "trial {i} has {rows} channels, expected {d}"
                )));
            }
            if trial.shape() != trials[0].shape() {
                return Err(Error::Inconsistent(format!(
                    "trial {i} shape {:?} differs from {:?}",
                    trial.shape(),
                    trials[0].shape()
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Inconsistent(format!("label {bad} outside {{0, 1}}")));
        }
        if let Some(pos) = &channel_positions {
            if pos.len() != d {
                return Err(Error::Inconsistent(format!(
                    "{} positions for {d} channels",
                    pos.len()
                )));
            }
        }
        Ok(EpochSet { trials, labels, fs, channel_names, channel_positions })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[Tensor] {
        &self.trials
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel_positions(&self) -> Option<&[(f64, f64)]> {
        self.channel_positions.as_deref()
    }

    /// Number of channels.
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Samples per trial (0 for an empty set).
    pub fn n_samples(&self) -> usize {
        self.trials.first().map_or(0, |t| t.shape()[1])
    }

    /// Trial count per class.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, u8)> {
        self.trials.iter().zip(self.labels.iter().copied())
    }

    /// Copies out the trials at `indices`, preserving metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<EpochSet> {
        let trials = indices.iter().map(|&i| self.trials[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        EpochSet::new(
            trials,
            labels,
            self.fs,
            self.channel_names.clone(),
            self.channel_positions.clone(),
        )
    }

    /// Returns a copy with every label flipped.
    pub fn label_flipped(&self) -> EpochSet {
        let mut out = self.clone();
        for l in &mut out.labels {
            *l = 1 - *l;
        }
        out
    }
}

/// Splits a set into `(train, test)` with `fraction` of trials in train.
/// With `stratified` the fraction is applied per class; a split that would
/// leave a class empty on either side is an error.
pub fn split(
    epochs: &EpochSet,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(EpochSet, EpochSet)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    if stratified {
        for class in 0..2u8 {
            let mut idx: Vec<usize> = (0..epochs.len())
                .filter(|&i| epochs.labels[i] == class)
                .collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let take = (fraction * idx.len() as f64).round() as usize;
            if take == 0 || take == idx.len() {
                return Err(Error::EmptyClass(class));
            }
            train_idx.extend_from_slice(&idx[..take]);
            test_idx.extend_from_slice(&idx[take..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..epochs.len()).collect();
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).round() as usize;
        train_idx.extend_from_slice(&idx[..take]);
        test_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((epochs.subset(&train_idx)?, epochs.subset(&test_idx)?))
}
