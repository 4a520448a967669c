//! Classical common spatial patterns and the DeepCSP differentiable loss.
//!
//! The classical pipeline: trace-normalized trial covariances are averaged
//! per class, the composite covariance is whitened, and the whitened
//! class-1 covariance is eigendecomposed. Generalized eigenvalues lie in
//! [0, 1] and measure how class-1-dominant a direction is; the filter bank
//! keeps the top-n and bottom-n directions.
//!
//! The DeepCSP loss applies the same construction to latent features and
//! scores the selected spectrum as `-(1/2n) (sum top lambda + sum bottom
//! (1 - lambda))`: -0.5 when the classes are indistinguishable, -1 at
//! perfect separation. Gradients flow through the eigenvalues only (the
//! exact first-order rule for simple eigenvalues), then through the
//! trace-normalized covariances into the latents.

use serde::{Deserialize, Serialize};

use crate::data::EpochSet;
use crate::error::{Error, Result};
use crate::numcore::{generalized_eig_spd, Tensor};

/// Default covariance shrinkage scale; the ridge added to each class
/// covariance is `scale * trace / dim`.
pub const DEFAULT_SHRINKAGE: f64 = 1e-4;

/// Variance floor in `csp_features` before the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Adjacent selected eigenvalues closer than this raise the degeneracy flag.
const DEGENERACY_GAP: f64 = 1e-10;

/// Trace-normalized covariance of one trial.
#[derive(Debug, Clone)]
pub struct TrialCovariance {
    /// `X Xᵀ / trace(X Xᵀ)`, symmetric PSD with unit trace.
    pub matrix: Tensor,
    /// The normalizing scalar `trace(X Xᵀ)`.
    pub trace_norm: f64,
}

/// `X Xᵀ / trace(X Xᵀ)` for a channels-by-time trial.
pub fn normalized_covariance(x: &Tensor) -> Result<TrialCovariance> {
    let (d, t) = x.dims2()?;
    if !x.all_finite() {
        return Err(Error::NonFinite("trial"));
    }
    if t < d {
        log::warn!("trial has fewer samples ({t}) than channels ({d}); covariance is rank-deficient");
    }
    let gram = x.matmul(&x.transpose()?)?;
    let trace_norm = gram.trace()?;
    if trace_norm <= 0.0 {
        return Err(Error::InvalidArgument("all-zero trial has no covariance".into()));
    }
    Ok(TrialCovariance { matrix: gram.scale(1.0 / trace_norm), trace_norm })
}

/// Mean normalized covariance per class plus a shrinkage ridge
/// `shrinkage * trace / dim` on the diagonal.
pub fn class_covariances_of<'a>(
    trials: impl IntoIterator<Item = (&'a Tensor, u8)>,
    shrinkage: f64,
) -> Result<(Tensor, Tensor)> {
    let mut sums: [Option<Tensor>; 2] = [None, None];
    let mut counts = [0usize; 2];
    for (x, label) in trials {
        if label > 1 {
            return Err(Error::InvalidArgument(format!("label {label} outside {{0, 1}}")));
        }
        let cov = normalized_covariance(x)?;
        match &mut sums[label as usize] {
            Some(acc) => acc.axpy(1.0, &cov.matrix)?,
            slot @ None => *slot = Some(cov.matrix),
        }
        counts[label as usize] += 1;
    }
    let mut out = Vec::with_capacity(2);
    for class in 0..2 {
        let sum = sums[class].take().ok_or(Error::EmptyClass(class as u8))?;
        let mut mean = sum.scale(1.0 / counts[class] as f64);
        let d = mean.dims2()?.0;
        let ridge = shrinkage * mean.trace()? / d as f64;
        for i in 0..d {
            let v = mean.at2(i, i) + ridge;
            mean.set2(i, i, v);
        }
        out.push(mean);
    }
    let c2 = out.pop().unwrap();
    let c1 = out.pop().unwrap();
    Ok((c1, c2))
}

/// Class covariances of a full epoch set.
pub fn class_covariances(epochs: &EpochSet, shrinkage: f64) -> Result<(Tensor, Tensor)> {
    class_covariances_of(epochs.iter(), shrinkage)
}

/// Ordered spatial filters with their generalized eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialFilterBank {
    /// D x 2n; the first n columns are the most class-0-dominant
    /// directions, the last n the most class-1-dominant.
    pub filters: Tensor,
    /// Eigenvalues matching the columns, each in [0, 1].
    pub eigenvalues: Vec<f64>,
    pub n_components: usize,
}

impl SpatialFilterBank {
    pub fn n_channels(&self) -> usize {
        self.filters.shape()[0]
    }

    /// The selected columns as a D x k matrix: the first `ceil(k/2)` from
    /// the top block and the rest from the tail of the bottom block.
    pub fn selected_columns(&self, k: usize) -> Result<Tensor> {
        let (d, total) = self.filters.dims2()?;
        if k == 0 || k > total {
            return Err(Error::InvalidArgument(format!(
                "cannot select {k} of {total} filters"
            )));
        }
        let head = k.div_ceil(2);
        let tail = k - head;
        let mut cols: Vec<usize> = (0..head).collect();
        cols.extend(total - tail..total);
        let mut out = Tensor::zeros(&[d, k]);
        for (dst, &src) in cols.iter().enumerate() {
            for r in 0..d {
                out.set2(r, dst, self.filters.at2(r, src));
            }
        }
        Ok(out)
    }
}

/// Fits the CSP filter bank from two class covariances: solve
/// `C1 w = lambda (C1 + C2) w`, keep the n largest and n smallest
/// eigenvalues, normalize `wᵀ (C1 + C2) w = 1`.
pub fn csp_fit(c1: &Tensor, c2: &Tensor, n: usize) -> Result<SpatialFilterBank> {
    let (d, _) = c1.dims2()?;
    if n == 0 || 2 * n > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= 2n <= {d} channels, got n = {n}"
        )));
    }
    let composite = c1.add(c2)?;
    let eig = generalized_eig_spd(c1, &composite)?;
    let mut filters = Tensor::zeros(&[d, 2 * n]);
    let mut eigenvalues = Vec::with_capacity(2 * n);
    let picks: Vec<usize> = (0..n).chain(d - n..d).collect();
    for (dst, &src) in picks.iter().enumerate() {
        eigenvalues.push(eig.values[src].clamp(0.0, 1.0));
        for r in 0..d {
            filters.set2(r, dst, eig.vectors.at2(r, src));
        }
    }
    Ok(SpatialFilterBank { filters, eigenvalues, n_components: n })
}

/// Log projected variances: `log(diag(Wᵀ X Xᵀ W) / T)`, floored at
/// [`VARIANCE_FLOOR`]. Returns the features and how many hit the floor.
pub fn csp_features_with_diag(bank: &SpatialFilterBank, x: &Tensor) -> Result<(Vec<f64>, usize)> {
    let (d, t) = x.dims2()?;
    if d != bank.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "bank has {} channels, trial has {d}",
            bank.n_channels()
        )));
    }
    let proj = bank.filters.transpose()?.matmul(x)?;
    let k = proj.shape()[0];
    let mut floored = 0usize;
    let mut features = Vec::with_capacity(k);
    for j in 0..k {
        let row = proj.row(j);
        let var = row.iter().map(|v| v * v).sum::<f64>() / t as f64;
        let var = if var < VARIANCE_FLOOR {
            floored += 1;
            VARIANCE_FLOOR
        } else {
            var
        };
        features.push(var.ln());
    }
    Ok((features, floored))
}

/// [`csp_features_with_diag`] without the floor diagnostic.
pub fn csp_features(bank: &SpatialFilterBank, x: &Tensor) -> Result<Vec<f64>> {
    Ok(csp_features_with_diag(bank, x)?.0)
}

/// The trace-ratio objective `trace(Wᵀ C1 W) / trace(Wᵀ (C1+C2) W)`.
/// On eigenvector subsets this equals the mean of the selected
/// generalized eigenvalues.
pub fn trace_ratio(w_sel: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<f64> {
    let (d, _) = w_sel.dims2()?;
    let (dc, _) = c1.dims2()?;
    if d != dc || c1.shape() != c2.shape() {
        return Err(Error::ShapeMismatch(format!(
            "filters {:?} against covariances {:?} / {:?}",
            w_sel.shape(),
            c1.shape(),
            c2.shape()
        )));
    }
    let wt = w_sel.transpose()?;
    let num = wt.matmul(c1)?.matmul(w_sel)?.trace()?;
    let composite = c1.add(c2)?;
    let den = wt.matmul(&composite)?.matmul(w_sel)?.trace()?;
    if den == 0.0 {
        return Err(Error::InvalidArgument("zero denominator in trace ratio".into()));
    }
    Ok(num / den)
}

/// Everything the backward pass needs from one DeepCSP loss evaluation.
#[derive(Debug, Clone)]
pub struct DeepCspLossState {
    pub loss: f64,
    /// Full generalized spectrum, descending.
    pub eigenvalues: Vec<f64>,
    /// Indices of the selected top-n and bottom-n eigenvalues.
    pub selected: Vec<usize>,
    /// d loss / d (class-0 mean covariance), symmetric.
    pub grads_c1: Tensor,
    /// d loss / d (class-1 mean covariance), symmetric.
    pub grads_c2: Tensor,
    /// Set when adjacent selected eigenvalues are closer than 1e-10; the
    /// gradient is then a subgradient.
    pub degenerate: bool,
    n_class: [usize; 2],
    dim: usize,
}

impl DeepCspLossState {
    pub fn class_counts(&self) -> [usize; 2] {
        self.n_class
    }

    /// Mean of the top-n eigenvalues, the per-epoch separability score.
    pub fn top_mean(&self) -> f64 {
        let n = self.selected.len() / 2;
        self.eigenvalues.iter().take(n).sum::<f64>() / n as f64
    }
}

/// DeepCSP loss over per-trial latent features.
///
/// Builds class covariances from the latents, solves the generalized
/// problem, and scores the selected spectrum. The returned state carries
/// `dL/dC1` and `dL/dC2` assembled from the per-eigenvalue rules
/// `d lambda / d C1 = (1 - lambda) v vᵀ` and
/// `d lambda / d C2 = -lambda v vᵀ` (with `vᵀ (C1 + C2) v = 1`).
pub fn deepcsp_loss(
    latents: &[Tensor],
    labels: &[u8],
    n: usize,
    shrinkage: f64,
) -> Result<DeepCspLossState> {
    if latents.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents vs {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let dim = latents
        .first()
        .ok_or(Error::InvalidArgument("no latent trials".into()))?
        .dims2()?
        .0;
    if 2 * n > dim {
        return Err(Error::InvalidArgument(format!(
            "need 2n <= {dim} latent channels, got n = {n}"
        )));
    }
    let (c1, c2) = class_covariances_of(latents.iter().zip(labels.iter().copied()), shrinkage)?;
    let composite = c1.add(&c2)?;
    let eig = generalized_eig_spd(&c1, &composite)?;

    let selected: Vec<usize> = (0..n).chain(dim - n..dim).collect();
    let mut loss = 0.0;
    let mut grads_c1 = Tensor::zeros(&[dim, dim]);
    let mut grads_c2 = Tensor::zeros(&[dim, dim]);
    let scale = -1.0 / (2 * n) as f64;
    for (pos, &idx) in selected.iter().enumerate() {
        let lambda = eig.values[idx];
        let v = eig.vectors.column(idx);
        let top = pos < n;
        if top {
            loss += scale * lambda;
            grads_c1.add_scaled_outer(scale * (1.0 - lambda), &v)?;
            grads_c2.add_scaled_outer(scale * (-lambda), &v)?;
        } else {
            loss += scale * (1.0 - lambda);
            grads_c1.add_scaled_outer(-scale * (1.0 - lambda), &v)?;
            grads_c2.add_scaled_outer(-scale * (-lambda), &v)?;
        }
    }

    let degenerate = selected.iter().any(|&idx| {
        let left = idx.checked_sub(1).map(|j| (eig.values[j] - eig.values[idx]).abs());
        let right = eig.values.get(idx + 1).map(|&v| (eig.values[idx] - v).abs());
        left.map_or(false, |g| g < DEGENERACY_GAP) || right.map_or(false, |g| g < DEGENERACY_GAP)
    });

    let mut n_class = [0usize; 2];
    for &l in labels {
        n_class[l as usize] += 1;
    }
    Ok(DeepCspLossState {
        loss,
        eigenvalues: eig.values,
        selected,
        grads_c1,
        grads_c2,
        degenerate,
        n_class,
        dim,
    })
}

/// Chains `dL/dC_k` through the trace-normalized covariance into each
/// latent trial: with `A = H Hᵀ`, `t = trace(A)` and
/// `G = (dL/dC_k) / |class k|`, the gradient is
/// `(2/t) (G - (trace(G A)/t) I) H`.
pub fn deepcsp_backward(
    state: &DeepCspLossState,
    latents: &[Tensor],
    labels: &[u8],
) -> Result<Vec<Tensor>> {
    if latents.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents vs {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let mut counts = [0usize; 2];
    for &l in labels {
        if l > 1 {
            return Err(Error::InvalidArgument(format!("label {l} outside {{0, 1}}")));
        }
        counts[l as usize] += 1;
    }
    if counts != state.n_class {
        return Err(Error::InvalidArgument(format!(
            "stale loss state: built for class counts {:?}, got {:?}",
            state.n_class, counts
        )));
    }
    let mut grads = Vec::with_capacity(latents.len());
    for (h, &label) in latents.iter().zip(labels) {
        let (d, _) = h.dims2()?;
        if d != state.dim {
            return Err(Error::InvalidArgument(format!(
                "stale loss state: built for {} latent channels, trial has {d}",
                state.dim
            )));
        }
        let g_class = if label == 0 { &state.grads_c1 } else { &state.grads_c2 };
        let g = g_class.scale(1.0 / state.n_class[label as usize] as f64);
        let gram = h.matmul(&h.transpose()?)?;
        let t = gram.trace()?;
        let inner: f64 = g.data().iter().zip(gram.data()).map(|(a, b)| a * b).sum();
        // (2/t) G H - (2 inner / t^2) H
        let mut grad = g.matmul(h)?.scale(2.0 / t);
        grad.axpy(-2.0 * inner / (t * t), h)?;
        grads.push(grad);
    }
    Ok(grads)
}

/// JSON-facing form of a filter bank, as written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterBankJson {
    pub n_components: usize,
    pub channel_names: Vec<String>,
    pub eigenvalues: Vec<f64>,
    /// Row-major D x 2n filter matrix.
    pub filters: Vec<f64>,
}

impl FilterBankJson {
    pub fn from_bank(bank: &SpatialFilterBank, channel_names: &[String]) -> Result<Self> {
        if channel_names.len() != bank.n_channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} names for a {}-channel bank",
                channel_names.len(),
                bank.n_channels()
            )));
        }
        Ok(FilterBankJson {
            n_components: bank.n_components,
            channel_names: channel_names.to_vec(),
            eigenvalues: bank.eigenvalues.clone(),
            filters: bank.filters.data().to_vec(),
        })
    }

    pub fn to_bank(&self) -> Result<SpatialFilterBank> {
        let d = self.channel_names.len();
        let cols = 2 * self.n_components;
        if self.eigenvalues.len() != cols || self.filters.len() != d * cols {
            return Err(Error::Inconsistent(format!(
                "filter bank JSON: {d} channels, n = {}, but {} eigenvalues and {} filter entries",
                self.n_components,
                self.eigenvalues.len(),
                self.filters.len()
            )));
        }
        Ok(SpatialFilterBank {
            filters: Tensor::new(vec![d, cols], self.filters.clone())?,
            eigenvalues: self.eigenvalues.clone(),
            n_components: self.n_components,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_trial(d: usize, t: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![d, t], (0..d * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_trial_covariance() {
        let cov = normalized_covariance(&Tensor::eye(2)).unwrap();
        assert_eq!(cov.matrix.data(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(cov.trace_norm, 2.0);
    }

    #[test]
    fn rank_one_trial_covariance() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let cov = normalized_covariance(&x).unwrap();
        assert_eq!(cov.matrix.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn trace_is_one_and_zero_trials_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_trial(4, 100, &mut rng);
        let cov = normalized_covariance(&x).unwrap();
        assert!((cov.matrix.trace().unwrap() - 1.0).abs() < 1e-12);
        assert!(normalized_covariance(&Tensor::zeros(&[3, 10])).is_err());
    }

    #[test]
    fn class_means_match_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials: Vec<Tensor> = (0..8).map(|_| random_trial(3, 50, &mut rng)).collect();
        let labels = [0u8, 1, 0, 1, 0, 1, 0, 1];
        let (c1, _) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 0.0).unwrap();
        let mut naive = Tensor::zeros(&[3, 3]);
        let mut count = 0.0;
        for (x, l) in trials.iter().zip(labels) {
            if l == 0 {
                naive.axpy(1.0, &normalized_covariance(x).unwrap().matrix).unwrap();
                count += 1.0;
            }
        }
        let naive = naive.scale(1.0 / count);
        assert!(c1.sub(&naive).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn duplicated_trials_leave_the_mean_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials: Vec<Tensor> = (0..4).map(|_| random_trial(3, 40, &mut rng)).collect();
        let labels = [0u8, 0, 1, 1];
        let (a1, a2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 0.0).unwrap();
        let doubled: Vec<&Tensor> = trials.iter().chain(trials.iter()).collect();
        let doubled_labels: Vec<u8> = labels.iter().chain(labels.iter()).copied().collect();
        let (b1, b2) = class_covariances_of(
            doubled.into_iter().zip(doubled_labels.into_iter()),
            0.0,
        )
        .unwrap();
        assert!(a1.sub(&b1).unwrap().frobenius_norm() < 1e-12);
        assert!(a2.sub(&b2).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn single_trial_class_gets_the_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = [random_trial(3, 40, &mut rng), random_trial(3, 40, &mut rng)];
        let labels = [0u8, 1];
        let (c1, _) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let base = normalized_covariance(&trials[0]).unwrap().matrix;
        let ridge = 1e-4 * base.trace().unwrap() / 3.0;
        let mut expect = base;
        for i in 0..3 {
            let v = expect.at2(i, i) + ridge;
            expect.set2(i, i, v);
        }
        assert!(c1.sub(&expect).unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = [random_trial(3, 40, &mut rng)];
        let labels = [0u8];
        assert!(matches!(
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 0.0),
            Err(Error::EmptyClass(1))
        ));
    }

    fn diag(values: &[f64]) -> Tensor {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.set2(i, i, v);
        }
        t
    }

    #[test]
    fn diagonal_fit_selects_extremes() {
        let c1 = diag(&[0.45, 0.25, 0.05]);
        let c2 = diag(&[0.05, 0.25, 0.45]);
        let bank = csp_fit(&c1, &c2, 1).unwrap();
        assert!((bank.eigenvalues[0] - 0.9).abs() < 1e-10);
        assert!((bank.eigenvalues[1] - 0.1).abs() < 1e-10);
        // filters align with e1 and e3 up to the (C1+C2)-normalization
        let f0 = bank.filters.column(0);
        let f1 = bank.filters.column(1);
        assert!(f0[0].abs() > 1e3 * (f0[1].abs() + f0[2].abs()).max(1e-12));
        assert!(f1[2].abs() > 1e3 * (f1[0].abs() + f1[1].abs()).max(1e-12));
    }

    #[test]
    fn equal_covariances_have_flat_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_trial(4, 60, &mut rng);
        let c = normalized_covariance(&x).unwrap().matrix;
        let bank = csp_fit(&c, &c, 2).unwrap();
        for lam in &bank.eigenvalues {
            assert!((lam - 0.5).abs() < 1e-9, "lambda {lam}");
        }
    }

    #[test]
    fn bank_is_composite_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials: Vec<Tensor> = (0..10).map(|_| random_trial(5, 80, &mut rng)).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let (c1, c2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let bank = csp_fit(&c1, &c2, 2).unwrap();
        let composite = c1.add(&c2).unwrap();
        let gram = bank
            .filters
            .transpose()
            .unwrap()
            .matmul(&composite)
            .unwrap()
            .matmul(&bank.filters)
            .unwrap();
        let err = gram.sub(&Tensor::eye(4)).unwrap().frobenius_norm();
        assert!(err < 1e-8, "Wᵀ(C1+C2)W deviates from I by {err}");
    }

    #[test]
    fn recovers_planted_unmixing_direction() {
        let mut spec = SynthSpec::new(4, 512, 128.0, 30);
        spec.noise_sigma = 0.0;
        spec.profile_class0 = vec![4.0, 1.0, 1.0, 1.0];
        spec.profile_class1 = vec![1.0, 4.0, 1.0, 1.0];
        spec.seed = 9;
        let (set, truth) = synth_generate(&spec).unwrap();
        let (c1, c2) = class_covariances(&set, 1e-4).unwrap();
        let bank = csp_fit(&c1, &c2, 1).unwrap();
        let w = bank.filters.column(0);
        let target = truth.unmixing_direction(0);
        let dot: f64 = w.iter().zip(&target).map(|(a, b)| a * b).sum();
        let wn: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tn: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = (dot / (wn * tn)).abs();
        assert!(cos > 0.95, "|cosine| {cos}");
    }

    #[test]
    fn features_are_log_variances() {
        let e = std::f64::consts::E;
        let bank = SpatialFilterBank {
            filters: Tensor::eye(2),
            eigenvalues: vec![1.0, 0.0],
            n_components: 1,
        };
        let x = Tensor::from_rows(&[
            vec![1.0, -1.0, 1.0, -1.0],
            vec![e.sqrt(), -e.sqrt(), e.sqrt(), -e.sqrt()],
        ])
        .unwrap();
        let f = csp_features(&bank, &x).unwrap();
        assert!(f[0].abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_shifts_features_by_twice_log_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials: Vec<Tensor> = (0..6).map(|_| random_trial(4, 64, &mut rng)).collect();
        let labels: Vec<u8> = vec![0, 0, 0, 1, 1, 1];
        let (c1, c2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let bank = csp_fit(&c1, &c2, 2).unwrap();
        let x = random_trial(4, 64, &mut rng);
        let c = 3.5f64;
        let base = csp_features(&bank, &x).unwrap();
        let scaled = csp_features(&bank, &x.scale(c)).unwrap();
        for (b, s) in base.iter().zip(&scaled) {
            assert!((s - b - 2.0 * c.ln()).abs() < 1e-10, "{b} -> {s}");
        }
    }

    #[test]
    fn features_match_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials: Vec<Tensor> = (0..6).map(|_| random_trial(4, 64, &mut rng)).collect();
        let labels: Vec<u8> = vec![0, 0, 0, 1, 1, 1];
        let (c1, c2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let bank = csp_fit(&c1, &c2, 2).unwrap();
        let x = random_trial(4, 64, &mut rng);
        let features = csp_features(&bank, &x).unwrap();
        for (j, &feat) in features.iter().enumerate() {
            let w = bank.filters.column(j);
            let mut var = 0.0;
            for t in 0..64 {
                let p: f64 = (0..4).map(|ch| w[ch] * x.at2(ch, t)).sum();
                var += p * p;
            }
            var /= 64.0;
            assert!((feat - var.ln()).abs() < 1e-10, "component {j}");
        }
    }

    #[test]
    fn zero_variance_hits_the_floor() {
        let bank = SpatialFilterBank {
            filters: Tensor::eye(2),
            eigenvalues: vec![1.0, 0.0],
            n_components: 1,
        };
        let x = Tensor::from_rows(&[vec![0.0; 4], vec![1.0, -1.0, 1.0, -1.0]]).unwrap();
        let (f, floored) = csp_features_with_diag(&bank, &x).unwrap();
        assert_eq!(floored, 1);
        assert!((f[0] - VARIANCE_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn trace_ratio_on_eigenvectors_is_mean_lambda() {
        let c1 = diag(&[0.45, 0.25, 0.05]);
        let c2 = diag(&[0.05, 0.25, 0.45]);
        let bank = csp_fit(&c1, &c2, 1).unwrap();
        let top = bank.selected_columns(1).unwrap();
        let r = trace_ratio(&top, &c1, &c2).unwrap();
        assert!((r - 0.9).abs() < 1e-10, "top-1 ratio {r}");
        let both = &bank.filters;
        let r2 = trace_ratio(both, &c1, &c2).unwrap();
        assert!((r2 - 0.5).abs() < 1e-10, "symmetric pair ratio {r2}");
    }

    #[test]
    fn deepcsp_loss_on_diagonal_latents() {
        // Per-class latents whose normalized covariances are proportional
        // to diag(0.9, 0.5, 0.1) and its mirror.
        let h0 = diag(&[0.9f64.sqrt(), 0.5f64.sqrt(), 0.1f64.sqrt()]);
        let h1 = diag(&[0.1f64.sqrt(), 0.5f64.sqrt(), 0.9f64.sqrt()]);
        let latents = vec![h0, h1];
        let labels = vec![0u8, 1];
        let state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        for (got, want) in state.eigenvalues.iter().zip(&[0.9, 0.5, 0.1]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        assert!((state.loss + 0.9).abs() < 1e-10, "loss {}", state.loss);
        assert!(!state.degenerate);
    }

    #[test]
    fn identical_classes_sit_at_the_chance_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_trial(4, 64, &mut rng);
        let b = random_trial(4, 64, &mut rng);
        let latents = vec![a.clone(), b.clone(), a, b];
        let labels = vec![0u8, 0, 1, 1];
        let state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        for lam in &state.eigenvalues {
            assert!((lam - 0.5).abs() < 1e-9);
        }
        assert!((state.loss + 0.5).abs() < 1e-9);
    }

    #[test]
    fn loss_stays_in_its_range_on_random_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let latents: Vec<Tensor> =
                (0..6).map(|_| random_trial(5, 40, &mut rng)).collect();
            let labels: Vec<u8> = vec![0, 0, 0, 1, 1, 1];
            let state = deepcsp_loss(&latents, &labels, 2, 1e-4).unwrap();
            assert!(
                (-1.0 - 1e-9..=-0.5 + 1e-9).contains(&state.loss),
                "case {case}: loss {} out of range",
                state.loss
            );
        }
    }

    #[test]
    fn zero_gradient_state_gives_zero_latent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let latents = vec![random_trial(3, 20, &mut rng), random_trial(3, 20, &mut rng)];
        let labels = vec![0u8, 1];
        let mut state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        state.grads_c1 = Tensor::zeros(&[3, 3]);
        state.grads_c2 = Tensor::zeros(&[3, 3]);
        let grads = deepcsp_backward(&state, &latents, &labels).unwrap();
        for g in grads {
            assert_eq!(g.frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn identity_gradient_vanishes_by_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let latents = vec![random_trial(3, 20, &mut rng), random_trial(3, 20, &mut rng)];
        let labels = vec![0u8, 1];
        let mut state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        state.grads_c1 = Tensor::eye(3);
        state.grads_c2 = Tensor::zeros(&[3, 3]);
        let grads = deepcsp_backward(&state, &latents, &labels).unwrap();
        assert!(grads[0].frobenius_norm() < 1e-12, "trace direction must vanish");
    }

    #[test]
    fn stale_state_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let latents = vec![random_trial(3, 20, &mut rng), random_trial(3, 20, &mut rng)];
        let labels = vec![0u8, 1];
        let state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        let more = vec![
            latents[0].clone(),
            latents[1].clone(),
            random_trial(3, 20, &mut rng),
        ];
        let more_labels = vec![0u8, 1, 1];
        assert!(deepcsp_backward(&state, &more, &more_labels).is_err());
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (d, t, n) = (4usize, 30usize, 1usize);
        // planted variance differences keep the spectrum well separated
        let mut latents = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let class = (i % 2) as u8;
            let mut trial = random_trial(d, t, &mut rng);
            let boost = if class == 0 { 0 } else { 1 };
            for v in trial.data_mut()[boost * t..(boost + 1) * t].iter_mut() {
                *v *= 3.0;
            }
            latents.push(trial);
            labels.push(class);
        }
        let state = deepcsp_loss(&latents, &labels, n, 1e-4).unwrap();
        let grads = deepcsp_backward(&state, &latents, &labels).unwrap();

        let eps = 1e-5;
        for trial_idx in [0usize, 1] {
            for coord in [0usize, 7, 33, 100].into_iter().filter(|&c| c < d * t) {
                let mut probe = latents.clone();
                probe[trial_idx].data_mut()[coord] += eps;
                let hi = deepcsp_loss(&probe, &labels, n, 1e-4).unwrap().loss;
                probe[trial_idx].data_mut()[coord] -= 2.0 * eps;
                let lo = deepcsp_loss(&probe, &labels, n, 1e-4).unwrap().loss;
                let numeric = (hi - lo) / (2.0 * eps);
                let analytic = grads[trial_idx].data()[coord];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4,
                    "trial {trial_idx} coord {coord}: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn eigenvalue_complementarity_under_label_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let trials: Vec<Tensor> = (0..12).map(|_| random_trial(6, 100, &mut rng)).collect();
        let labels: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let swapped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let (c1, c2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let (s1, s2) =
            class_covariances_of(trials.iter().zip(swapped.iter().copied()), 1e-4).unwrap();
        assert!(s1.sub(&c2).unwrap().frobenius_norm() < 1e-15);
        assert!(s2.sub(&c1).unwrap().frobenius_norm() < 1e-15);
        let bank = csp_fit(&c1, &c2, 2).unwrap();
        let bank_swapped = csp_fit(&s1, &s2, 2).unwrap();
        // spectrum maps lambda -> reverse(1 - lambda)
        let expect: Vec<f64> = bank.eigenvalues.iter().rev().map(|l| 1.0 - l).collect();
        for (a, b) in bank_swapped.eigenvalues.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn class_scaling_leaves_everything_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials: Vec<Tensor> = (0..8).map(|_| random_trial(4, 50, &mut rng)).collect();
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let scaled: Vec<Tensor> = trials
            .iter()
            .zip(&labels)
            .map(|(x, &l)| if l == 0 { x.scale(7.25) } else { x.clone() })
            .collect();
        let (a1, a2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let (b1, b2) =
            class_covariances_of(scaled.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        assert!(a1.sub(&b1).unwrap().frobenius_norm() < 1e-12);
        assert!(a2.sub(&b2).unwrap().frobenius_norm() < 1e-12);
        let la = deepcsp_loss(&trials, &labels, 2, 1e-4).unwrap().loss;
        let lb = deepcsp_loss(&scaled, &labels, 2, 1e-4).unwrap().loss;
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn filter_bank_json_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let trials: Vec<Tensor> = (0..6).map(|_| random_trial(3, 40, &mut rng)).collect();
        let labels: Vec<u8> = vec![0, 0, 0, 1, 1, 1];
        let (c1, c2) =
            class_covariances_of(trials.iter().zip(labels.iter().copied()), 1e-4).unwrap();
        let bank = csp_fit(&c1, &c2, 1).unwrap();
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let json = FilterBankJson::from_bank(&bank, &names).unwrap();
        let text = serde_json::to_string(&json).unwrap();
        let back: FilterBankJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_bank().unwrap(), bank);
    }

    #[test]
    fn identity_mixed_case_flags_degeneracy() {
        // two identical latent distributions give a flat spectrum at 0.5
        let h = diag(&[1.0, 1.0, 1.0]);
        let latents = vec![h.clone(), h];
        let labels = vec![0u8, 1];
        let state = deepcsp_loss(&latents, &labels, 1, 0.0).unwrap();
        assert!(state.degenerate, "flat spectrum must set the degeneracy flag");
    }
}
