//! The alternating two-optimizer training protocol, evaluation, and
//! figure-style exports.
//!
//! Each epoch runs three phases: (1) the whole training split is pushed
//! through the feature extractor, the DeepCSP loss is evaluated on the
//! latents, and one SGD step at `lr_feature` updates the feature group;
//! (2) the spatial filter bank is refit on fresh latents; (3) the
//! classifier group takes a full pass of minibatch SGD steps at
//! `lr_classifier` on cross-entropy over the DeepCSP-head features. The
//! best-by-validation-cross-entropy snapshot is returned.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{
    connectivity_matrix_with, graph_normalize, ConnectivityConfig, Estimator,
};
use crate::csp::{
    class_covariances_of, csp_features, csp_fit, deepcsp_backward, deepcsp_loss,
    SpatialFilterBank, DEFAULT_SHRINKAGE,
};
use crate::data::{split, EpochSet};
use crate::error::{Error, Result};
use crate::models::checkpoint::AdjacencyMeta;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::numcore::{Tape, Tensor};

/// Protocol hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// SGD step for the feature extractor (DeepCSP loss).
    pub lr_feature: f64,
    /// SGD step for the classifier (cross-entropy).
    pub lr_classifier: f64,
    /// Spatial filter pairs n.
    pub n_components: usize,
    pub batch_size: usize,
    /// Epoch budget.
    pub epochs: usize,
    pub seed: u64,
    /// Early-stop patience on validation cross-entropy.
    pub early_stop_patience: usize,
    /// Fraction of the input carved off for validation.
    pub val_fraction: f64,
    /// Analysis band for the electrode graph (graph variant).
    pub band: (f64, f64),
    /// Connectivity estimator for the electrode graph (graph variant).
    pub estimator: Estimator,
    /// Covariance shrinkage scale.
    pub shrinkage: f64,
    /// Graph edge threshold before normalization.
    pub graph_threshold: f64,
    pub graph_self_loops: bool,
    #[serde(default)]
    pub connectivity: ConnectivityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_feature: 0.01,
            lr_classifier: 0.1,
            n_components: 4,
            batch_size: 64,
            epochs: 200,
            seed: 42,
            early_stop_patience: 20,
            val_fraction: 0.2,
            band: (8.0, 30.0),
            estimator: Estimator::Plv,
            shrinkage: DEFAULT_SHRINKAGE,
            graph_threshold: 0.0,
            graph_self_loops: false,
            connectivity: ConnectivityConfig::default(),
        }
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// DeepCSP loss on the training latents before the feature step.
    pub deepcsp_loss: f64,
    /// Full generalized spectrum at loss time.
    pub eigenvalues: Vec<f64>,
    /// Mean of the top-n eigenvalues after the refit.
    pub eig_top_mean: f64,
    pub train_accuracy: f64,
    pub train_cross_entropy: f64,
    pub val_accuracy: f64,
    pub val_cross_entropy: f64,
}

/// Evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub n_trials: usize,
    pub accuracy: f64,
    /// Per-class accuracy; `None` when the class is absent.
    pub per_class_accuracy: [Option<f64>; 2],
    pub cross_entropy: f64,
    /// DeepCSP loss of the latents, when both classes are present.
    pub deepcsp_loss: Option<f64>,
}

/// Run summary written next to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_cross_entropy: f64,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    pub param_count: usize,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Best-by-validation model.
    pub model: Model,
    /// Filter bank fitted alongside that model.
    pub bank: SpatialFilterBank,
    /// Electrode-graph provenance (graph variant).
    pub adjacency_meta: Option<AdjacencyMeta>,
    pub history: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    if cfg.lr_feature < 0.0 || cfg.lr_classifier < 0.0 {
        return Err(Error::InvalidArgument("learning rates must be nonnegative".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(0.0 < cfg.val_fraction && cfg.val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {} not in (0,1)",
            cfg.val_fraction
        )));
    }
    Ok(())
}

fn latents_of(model: &Model, set: &EpochSet) -> Result<Vec<Tensor>> {
    set.trials().iter().map(|x| model.latent(x)).collect()
}

fn head_features_of(bank: &SpatialFilterBank, latents: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    latents.iter().map(|h| csp_features(bank, h)).collect()
}

/// Accuracy and mean cross-entropy of the classifier over feature vectors.
fn classify_all(model: &Model, features: &[Vec<f64>], labels: &[u8]) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut ce = 0.0;
    for (f, &label) in features.iter().zip(labels) {
        let probs = model.classify(f)?;
        let pred = if probs[1] > probs[0] { 1u8 } else { 0u8 };
        if pred == label {
            correct += 1;
        }
        ce -= probs[label as usize].max(1e-300).ln();
    }
    let n = features.len().max(1) as f64;
    Ok((correct as f64 / n, ce / n))
}

/// One SGD step on the classifier for each minibatch in `order`.
fn classifier_pass(
    model: &mut Model,
    features: &[Vec<f64>],
    labels: &[u8],
    order: &[usize],
    batch_size: usize,
    lr: f64,
) -> Result<()> {
    let input = 2 * model.config.n_components;
    for batch in order.chunks(batch_size) {
        let rows = batch.len();
        let mut data = Vec::with_capacity(rows * input);
        let mut batch_labels = Vec::with_capacity(rows);
        for &i in batch {
            data.extend_from_slice(&features[i]);
            batch_labels.push(labels[i] as usize);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, input], data)?);
        let w1 = tape.param(model.classifier.w1.clone());
        let b1 = tape.param(model.classifier.b1.clone());
        let w2 = tape.param(model.classifier.w2.clone());
        let b2 = tape.param(model.classifier.b2.clone());
        let z1 = tape.matmul(x, w1)?;
        let z1 = tape.add(z1, b1)?;
        let a1 = tape.relu(z1)?;
        let z2 = tape.matmul(a1, w2)?;
        let logits = tape.add(z2, b2)?;
        let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
        let grads = tape.backward(loss)?;
        for (tensor, id) in model.classifier_params_mut().into_iter().zip([w1, b1, w2, b2]) {
            if let Some(g) = grads.get(id) {
                tensor.axpy(-lr, g)?;
            }
        }
    }
    Ok(())
}

/// Trains the classifier group alone on fixed feature vectors. Used by
/// the classical CSP baseline.
pub fn fit_classifier(
    model: &mut Model,
    features: &[Vec<f64>],
    labels: &[u8],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature vectors vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        classifier_pass(model, features, labels, &order, batch_size, lr)?;
    }
    Ok(())
}

/// Runs the two-optimizer protocol on `train_set`, which is split
/// internally into training and validation parts (stratified by class).
/// `model_cfg.n_components` is overridden by the train config so the head
/// and classifier agree.
pub fn train(
    train_set: &EpochSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    validate(cfg)?;
    let counts = train_set.class_counts();
    if counts[0] == 0 {
        return Err(Error::EmptyClass(0));
    }
    if counts[1] == 0 {
        return Err(Error::EmptyClass(1));
    }

    let mut model_cfg = model_cfg.clone();
    model_cfg.n_components = cfg.n_components;
    let (fit_set, val_set) = split(train_set, 1.0 - cfg.val_fraction, cfg.seed, true)?;

    let mut model = Model::init(model_cfg)?;
    let mut adjacency_meta = None;
    if model.config.kind == ModelKind::ShallowGcn {
        // the electrode graph is a frozen prior, estimated from the
        // training part only
        let graph =
            connectivity_matrix_with(&fit_set, cfg.estimator, cfg.band, &cfg.connectivity)?;
        let weights = graph_normalize(&graph, cfg.graph_self_loops, cfg.graph_threshold)?;
        adjacency_meta = Some(AdjacencyMeta {
            estimator: cfg.estimator,
            band: cfg.band,
            weights: weights.data().to_vec(),
        });
        model.adjacency = Some(weights);
    }
    if 2 * cfg.n_components > model.latent_rows() {
        return Err(Error::InvalidArgument(format!(
            "2n = {} exceeds the {} latent channels",
            2 * cfg.n_components,
            model.latent_rows()
        )));
    }

    let fit_labels = fit_set.labels().to_vec();
    let val_labels = val_set.labels().to_vec();
    let n = cfg.n_components;

    // epoch 0: the initial state before any step
    let latents = latents_of(&model, &fit_set)?;
    let state0 = deepcsp_loss(&latents, &fit_labels, n, cfg.shrinkage)?;
    let mut bank = {
        let (c1, c2) =
            class_covariances_of(latents.iter().zip(fit_labels.iter().copied()), cfg.shrinkage)?;
        csp_fit(&c1, &c2, n)?
    };
    let (train_acc0, train_ce0) =
        classify_all(&model, &head_features_of(&bank, &latents)?, &fit_labels)?;
    let val_latents = latents_of(&model, &val_set)?;
    let (val_acc0, val_ce0) =
        classify_all(&model, &head_features_of(&bank, &val_latents)?, &val_labels)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        deepcsp_loss: state0.loss,
        eigenvalues: state0.eigenvalues.clone(),
        eig_top_mean: bank.eigenvalues[..n].iter().sum::<f64>() / n as f64,
        train_accuracy: train_acc0,
        train_cross_entropy: train_ce0,
        val_accuracy: val_acc0,
        val_cross_entropy: val_ce0,
    }];

    let mut best = (model.clone(), bank.clone(), 0usize, val_ce0);
    let mut stale_epochs = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..fit_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        // (1) one feature-extractor step on the full training split
        let mut tape = Tape::new();
        let params = model.register_feature_params(&mut tape);
        let mut latent_ids = Vec::with_capacity(fit_set.len());
        for x in fit_set.trials() {
            latent_ids.push(model.latent_on_tape(&mut tape, &params, x)?);
        }
        let latents: Vec<Tensor> =
            latent_ids.iter().map(|&id| tape.value(id).clone()).collect();
        let state = deepcsp_loss(&latents, &fit_labels, n, cfg.shrinkage)?;
        if !state.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                context: format!("DeepCSP loss {}", state.loss),
            });
        }
        let latent_grads = deepcsp_backward(&state, &latents, &fit_labels)?;
        let loss_id = tape.custom_scalar(&latent_ids, state.loss, latent_grads)?;
        let grads = tape.backward(loss_id)?;
        let ids = params.all();
        for (tensor, id) in model.feature_params_mut().into_iter().zip(ids) {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        context: "non-finite feature gradient".into(),
                    });
                }
                tensor.axpy(-cfg.lr_feature, g)?;
            }
        }
        drop(tape);

        // (2) refit the bank on fresh latents
        let fresh = latents_of(&model, &fit_set)?;
        let (c1, c2) =
            class_covariances_of(fresh.iter().zip(fit_labels.iter().copied()), cfg.shrinkage)?;
        bank = csp_fit(&c1, &c2, n)?;

        // (3) classifier minibatch pass on head features
        let features = head_features_of(&bank, &fresh)?;
        order.shuffle(&mut rng);
        classifier_pass(
            &mut model,
            &features,
            &fit_labels,
            &order,
            cfg.batch_size,
            cfg.lr_classifier,
        )?;

        let (train_acc, train_ce) = classify_all(&model, &features, &fit_labels)?;
        let val_latents = latents_of(&model, &val_set)?;
        let val_features = head_features_of(&bank, &val_latents)?;
        let (val_acc, val_ce) = classify_all(&model, &val_features, &val_labels)?;
        if !val_ce.is_finite() || !train_ce.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, context: "cross-entropy".into() });
        }

        history.push(EpochRecord {
            epoch,
            deepcsp_loss: state.loss,
            eigenvalues: state.eigenvalues.clone(),
            eig_top_mean: bank.eigenvalues[..n].iter().sum::<f64>() / n as f64,
            train_accuracy: train_acc,
            train_cross_entropy: train_ce,
            val_accuracy: val_acc,
            val_cross_entropy: val_ce,
        });

        if val_ce < best.3 - 1e-12 {
            best = (model.clone(), bank.clone(), epoch, val_ce);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let last = history.last().expect("at least the initial record");
    let summary = TrainSummary {
        epochs_run: last.epoch,
        best_epoch: best.2,
        best_val_cross_entropy: best.3,
        final_train_accuracy: last.train_accuracy,
        final_val_accuracy: last.val_accuracy,
        param_count: best.0.param_count(),
    };
    Ok(TrainOutput {
        model: best.0,
        bank: best.1,
        adjacency_meta,
        history,
        summary,
    })
}

/// Evaluates a trained model with its frozen bank on a test set. The bank
/// is never refit here.
pub fn evaluate(model: &Model, bank: &SpatialFilterBank, test: &EpochSet) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let latents = latents_of(model, test)?;
    let features = head_features_of(bank, &latents)?;
    let labels = test.labels();
    let mut correct = [0usize; 2];
    let mut totals = [0usize; 2];
    let mut ce = 0.0;
    for (f, &label) in features.iter().zip(labels) {
        let probs = model.classify(f)?;
        let pred = if probs[1] > probs[0] { 1u8 } else { 0u8 };
        totals[label as usize] += 1;
        if pred == label {
            correct[label as usize] += 1;
        }
        ce -= probs[label as usize].max(1e-300).ln();
    }
    let n = test.len();
    let deepcsp = if totals[0] > 0 && totals[1] > 0 {
        Some(deepcsp_loss(&latents, labels, bank.n_components, DEFAULT_SHRINKAGE)?.loss)
    } else {
        None
    };
    Ok(Metrics {
        n_trials: n,
        accuracy: (correct[0] + correct[1]) as f64 / n as f64,
        per_class_accuracy: [
            (totals[0] > 0).then(|| correct[0] as f64 / totals[0] as f64),
            (totals[1] > 0).then(|| correct[1] as f64 / totals[1] as f64),
        ],
        cross_entropy: ce / n as f64,
        deepcsp_loss: deepcsp,
    })
}

/// Serializes the epoch history as JSON lines.
pub fn history_to_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// CSV of projected log-variance features: `components` columns (half
/// from the top of the bank, half from the bottom) plus the class label.
pub fn export_scatter(
    latents: &[Tensor],
    labels: &[u8],
    bank: &SpatialFilterBank,
    components: usize,
) -> Result<String> {
    if latents.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents vs {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let selected = bank.selected_columns(components)?;
    let mut out = String::new();
    for j in 0..components {
        out.push_str(&format!("comp{j},"));
    }
    out.push_str("label\n");
    for (h, &label) in latents.iter().zip(labels) {
        let (_, t) = h.dims2()?;
        let proj = selected.transpose()?.matmul(h)?;
        for j in 0..components {
            let row = proj.row(j);
            let var = (row.iter().map(|v| v * v).sum::<f64>() / t as f64).max(1e-300);
            out.push_str(&format!("{},", var.ln()));
        }
        out.push_str(&format!("{label}\n"));
    }
    Ok(out)
}

/// One channel's weight in a topomap component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopomapWeight {
    pub channel: String,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopomapComponent {
    pub component: usize,
    pub eigenvalue: f64,
    pub weights: Vec<TopomapWeight>,
}

/// Per-component spatial-filter weights on 2-D scalp coordinates, ready
/// for external plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopomapExport {
    pub components: Vec<TopomapComponent>,
}

impl TopomapExport {
    /// Channel with the largest absolute weight in a component.
    pub fn peak_channel(&self, component: usize) -> Option<&str> {
        self.components.get(component).and_then(|c| {
            c.weights
                .iter()
                .max_by(|a, b| a.weight.abs().partial_cmp(&b.weight.abs()).unwrap())
                .map(|w| w.channel.as_str())
        })
    }
}

/// Exports every filter column over the channel layout. Requires one
/// position per channel.
pub fn export_topomap(
    bank: &SpatialFilterBank,
    channel_names: &[String],
    positions: &[(f64, f64)],
) -> Result<TopomapExport> {
    let d = bank.n_channels();
    if channel_names.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} names for a {d}-channel bank",
            channel_names.len()
        )));
    }
    if positions.len() != d {
        return Err(Error::InvalidArgument(format!(
            "missing positions: {} provided for {d} channels",
            positions.len()
        )));
    }
    let cols = bank.filters.shape()[1];
    let mut components = Vec::with_capacity(cols);
    for j in 0..cols {
        let weights = (0..d)
            .map(|ch| TopomapWeight {
                channel: channel_names[ch].clone(),
                x: positions[ch].0,
                y: positions[ch].1,
                weight: bank.filters.at2(ch, j),
            })
            .collect();
        components.push(TopomapComponent {
            component: j,
            eigenvalue: bank.eigenvalues[j],
            weights,
        });
    }
    Ok(TopomapExport { components })
}
