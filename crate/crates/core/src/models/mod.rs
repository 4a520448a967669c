//! Model definitions: the shallow multi-scale temporal CNN and the
//! GraphSage-fused variant, both feeding the DeepCSP projection head and a
//! two-layer classifier.

pub mod checkpoint;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, read_checkpoint_bytes, save_checkpoint};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csp::{csp_features, SpatialFilterBank};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, ValueId};

/// Which architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Dense multi-scale temporal block only.
    ShallowDeepCsp,
    /// Depthwise temporal block fused with a GraphSage layer over the
    /// electrode graph.
    ShallowGcn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::ShallowDeepCsp => f.write_str("shallow-deepcsp"),
            ModelKind::ShallowGcn => f.write_str("shallow-gcn"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shallow-deepcsp" => Ok(ModelKind::ShallowDeepCsp),
            "shallow-gcn" => Ok(ModelKind::ShallowGcn),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input channels D.
    pub channels: usize,
    /// Sampling rate, which fixes the three kernel sizes.
    pub fs: f64,
    /// Filters per temporal branch (dense variant).
    pub temporal_filters: usize,
    /// GraphSage output features per node (graph variant).
    pub sage_features: usize,
    /// Spatial filter pairs n; the head emits 2n features.
    pub n_components: usize,
    /// Classifier hidden width.
    pub hidden: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, channels: usize, fs: f64) -> Self {
        ModelConfig {
            kind,
            channels,
            fs,
            temporal_filters: 8,
            sage_features: 2,
            n_components: 4,
            hidden: 16,
            seed: 42,
        }
    }
}

/// Kernel sizes of the three temporal branches: half, a third, and a
/// quarter of the sampling rate.
pub fn kernel_sizes(fs: f64) -> [usize; 3] {
    [
        (fs / 2.0).floor() as usize,
        (fs / 3.0).floor() as usize,
        (fs / 4.0).floor() as usize,
    ]
}

/// One temporal convolution branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    /// Dense: [F, D, K]; depthwise: [D, K].
    pub weight: Tensor,
    /// One bias per output row.
    pub bias: Tensor,
}

/// GraphSage weights: self and neighbor transforms, each F_g x F_in.
#[derive(Debug, Clone, PartialEq)]
pub struct SageParams {
    pub w_self: Tensor,
    pub w_neigh: Tensor,
}

/// Two affine layers: 2n -> hidden -> 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable weights plus the frozen electrode graph (graph variant).
/// Parameters are grouped into the feature extractor (temporal branches
/// and GraphSage) and the classifier; the two-optimizer protocol updates
/// the groups separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub temporal: Vec<ConvBranch>,
    pub sage: Option<SageParams>,
    pub classifier: Classifier,
    /// Row-stochastic neighbor weights, required for the graph variant.
    pub adjacency: Option<Tensor>,
}

/// Feature-extractor parameter ids registered on a tape.
pub struct FeatureParamIds {
    pub branch_weights: Vec<ValueId>,
    pub branch_biases: Vec<ValueId>,
    pub sage: Option<(ValueId, ValueId)>,
}

impl FeatureParamIds {
    pub fn all(&self) -> Vec<ValueId> {
        let mut ids: Vec<ValueId> = Vec::new();
        ids.extend(&self.branch_weights);
        ids.extend(&self.branch_biases);
        if let Some((s, n)) = self.sage {
            ids.push(s);
            ids.push(n);
        }
        ids
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases from the
    /// config seed.
    pub fn init(config: ModelConfig) -> Result<Model> {
        let d = config.channels;
        if d == 0 {
            return Err(Error::InvalidArgument("model needs at least one channel".into()));
        }
        if config.n_components == 0 {
            return Err(Error::InvalidArgument("n_components must be positive".into()));
        }
        let kernels = kernel_sizes(config.fs);
        if kernels.iter().any(|&k| k == 0) {
            return Err(Error::InvalidArgument(format!(
                "sampling rate {} gives an empty kernel",
                config.fs
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut temporal = Vec::with_capacity(3);
        for &k in &kernels {
            let branch = match config.kind {
                ModelKind::ShallowDeepCsp => {
                    let f = config.temporal_filters;
                    if f == 0 {
                        return Err(Error::InvalidArgument(
                            "temporal_filters must be positive".into(),
                        ));
                    }
                    ConvBranch {
                        weight: glorot(&[f, d, k], d * k, f * k, &mut rng),
                        bias: Tensor::zeros(&[f]),
                    }
                }
                ModelKind::ShallowGcn => ConvBranch {
                    weight: glorot(&[d, k], k, k, &mut rng),
                    bias: Tensor::zeros(&[d]),
                },
            };
            temporal.push(branch);
        }
        let sage = match config.kind {
            ModelKind::ShallowGcn => {
                let fg = config.sage_features;
                if fg == 0 {
                    return Err(Error::InvalidArgument("sage_features must be positive".into()));
                }
                Some(SageParams {
                    w_self: glorot(&[fg, 3], 3, fg, &mut rng),
                    w_neigh: glorot(&[fg, 3], 3, fg, &mut rng),
                })
            }
            ModelKind::ShallowDeepCsp => None,
        };
        let latent = latent_rows_for(&config);
        if 2 * config.n_components > latent {
            return Err(Error::InvalidArgument(format!(
                "2n = {} exceeds the {latent} latent channels",
                2 * config.n_components
            )));
        }
        let (input, hidden) = (2 * config.n_components, config.hidden);
        let classifier = Classifier {
            w1: glorot(&[input, hidden], input, hidden, &mut rng),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot(&[hidden, 2], hidden, 2, &mut rng),
            b2: Tensor::zeros(&[2]),
        };
        Ok(Model { config, temporal, sage, classifier, adjacency: None })
    }

    pub fn kernel_sizes(&self) -> [usize; 3] {
        kernel_sizes(self.config.fs)
    }

    /// Latent rows produced per trial.
    pub fn latent_rows(&self) -> usize {
        latent_rows_for(&self.config)
    }

    /// Smallest trial length the temporal block accepts.
    pub fn min_samples(&self) -> usize {
        self.kernel_sizes().into_iter().max().unwrap_or(1)
    }

    /// Total trainable scalar count, reported at build time.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for b in &self.temporal {
            n += b.weight.numel() + b.bias.numel();
        }
        if let Some(s) = &self.sage {
            n += s.w_self.numel() + s.w_neigh.numel();
        }
        n += self.classifier.w1.numel()
            + self.classifier.b1.numel()
            + self.classifier.w2.numel()
            + self.classifier.b2.numel();
        n
    }

    /// Mutable references to the feature-extractor group, in declaration
    /// order (matching [`FeatureParamIds`]).
    pub fn feature_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let mut biases: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.temporal {
            out.push(&mut b.weight);
            biases.push(&mut b.bias);
        }
        out.extend(biases);
        if let Some(s) = &mut self.sage {
            out.push(&mut s.w_self);
            out.push(&mut s.w_neigh);
        }
        out
    }

    /// Mutable references to the classifier group.
    pub fn classifier_params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.classifier.w1,
            &mut self.classifier.b1,
            &mut self.classifier.w2,
            &mut self.classifier.b2,
        ]
    }

    /// Registers feature-extractor parameters on a tape so one SGD step can
    /// update them from the DeepCSP loss.
    pub fn register_feature_params(&self, tape: &mut Tape) -> FeatureParamIds {
        let mut branch_weights = Vec::with_capacity(3);
        let mut branch_biases = Vec::with_capacity(3);
        for b in &self.temporal {
            branch_weights.push(tape.param(b.weight.clone()));
        }
        for b in &self.temporal {
            branch_biases.push(tape.param(b.bias.clone()));
        }
        let sage = self
            .sage
            .as_ref()
            .map(|s| (tape.param(s.w_self.clone()), tape.param(s.w_neigh.clone())));
        FeatureParamIds { branch_weights, branch_biases, sage }
    }

    /// Forward pass of the feature extractor for one trial, recorded on
    /// the tape. Returns the latent value id (rows x T).
    pub fn latent_on_tape(
        &self,
        tape: &mut Tape,
        params: &FeatureParamIds,
        x: &Tensor,
    ) -> Result<ValueId> {
        let (d, t) = x.dims2()?;
        if d != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} channels, trial has {d}",
                self.config.channels
            )));
        }
        if t < self.min_samples() {
            return Err(Error::InvalidArgument(format!(
                "trial length {t} shorter than the largest kernel {}",
                self.min_samples()
            )));
        }
        let xid = tape.leaf(x.clone());
        match self.config.kind {
            ModelKind::ShallowDeepCsp => {
                let mut branches = Vec::with_capacity(3);
                for b in 0..3 {
                    let conv = tape.conv1d(xid, params.branch_weights[b], params.branch_biases[b])?;
                    branches.push(tape.relu(conv)?);
                }
                tape.concat_rows(&branches)
            }
            ModelKind::ShallowGcn => {
                let adjacency = self.adjacency.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(
                        "graph variant needs a normalized adjacency before forward".into(),
                    )
                })?;
                let mut branches = Vec::with_capacity(3);
                for b in 0..3 {
                    let conv = tape.conv1d_depthwise(
                        xid,
                        params.branch_weights[b],
                        params.branch_biases[b],
                    )?;
                    branches.push(tape.relu(conv)?);
                }
                let temporal = tape.concat_rows(&branches)?; // 3D x T
                let (w_self, w_neigh) = params.sage.expect("sage params registered");

                // Constant selectors pull per-node branch stacks out of the
                // concatenated temporal features: rows b*D + v hold branch b
                // of node v.
                let mut node_outputs = Vec::with_capacity(d);
                for v in 0..d {
                    let mut pick = Tensor::zeros(&[3, 3 * d]);
                    let mut agg = Tensor::zeros(&[3, 3 * d]);
                    for b in 0..3 {
                        pick.set2(b, b * d + v, 1.0);
                        for u in 0..d {
                            agg.set2(b, b * d + u, adjacency.at2(v, u));
                        }
                    }
                    let pick_id = tape.leaf(pick);
                    let agg_id = tape.leaf(agg);
                    let h_v = tape.matmul(pick_id, temporal)?; // 3 x T
                    let n_v = tape.matmul(agg_id, temporal)?; // 3 x T
                    let own = tape.matmul(w_self, h_v)?;
                    let nbr = tape.matmul(w_neigh, n_v)?;
                    let pre = tape.add(own, nbr)?;
                    node_outputs.push(tape.relu(pre)?);
                }
                let mut parts = vec![temporal];
                parts.extend(node_outputs);
                tape.concat_rows(&parts)
            }
        }
    }

    /// Latent features for one trial without keeping a tape.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register_feature_params(&mut tape);
        let id = self.latent_on_tape(&mut tape, &params, x)?;
        Ok(tape.value(id).clone())
    }

    /// DeepCSP head: log projected variances of the latent under the bank.
    pub fn head_features(&self, bank: &SpatialFilterBank, x: &Tensor) -> Result<Vec<f64>> {
        let latent = self.latent(x)?;
        csp_features(bank, &latent)
    }

    /// Class probabilities for a feature vector.
    pub fn classify(&self, features: &[f64]) -> Result<[f64; 2]> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input"));
        }
        let (input, hidden) = self.classifier.w1.dims2()?;
        if features.len() != input {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {input} features, got {}",
                features.len()
            )));
        }
        let mut h = vec![0.0; hidden];
        for (j, hv) in h.iter_mut().enumerate() {
            let mut acc = self.classifier.b1.data()[j];
            for (i, &f) in features.iter().enumerate() {
                acc += f * self.classifier.w1.at2(i, j);
            }
            *hv = acc.max(0.0);
        }
        let mut logits = [0.0f64; 2];
        for (j, lv) in logits.iter_mut().enumerate() {
            let mut acc = self.classifier.b2.data()[j];
            for (i, &hv) in h.iter().enumerate() {
                acc += hv * self.classifier.w2.at2(i, j);
            }
            *lv = acc;
        }
        let max = logits[0].max(logits[1]);
        let e0 = (logits[0] - max).exp();
        let e1 = (logits[1] - max).exp();
        Ok([e0 / (e0 + e1), e1 / (e0 + e1)])
    }

    /// Temporal-block output alone (the latent of the dense variant; the
    /// pre-graph features of the graph variant).
    pub fn temporal_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register_feature_params(&mut tape);
        let xid = tape.leaf(x.clone());
        let mut branches = Vec::with_capacity(3);
        for b in 0..3 {
            let conv = match self.config.kind {
                ModelKind::ShallowDeepCsp => {
                    tape.conv1d(xid, params.branch_weights[b], params.branch_biases[b])?
                }
                ModelKind::ShallowGcn => {
                    tape.conv1d_depthwise(xid, params.branch_weights[b], params.branch_biases[b])?
                }
            };
            branches.push(tape.relu(conv)?);
        }
        let out = tape.concat_rows(&branches)?;
        Ok(tape.value(out).clone())
    }
}

fn latent_rows_for(config: &ModelConfig) -> usize {
    match config.kind {
        ModelKind::ShallowDeepCsp => 3 * config.temporal_filters,
        ModelKind::ShallowGcn => 3 * config.channels + config.channels * config.sage_features,
    }
}

/// Standalone GraphSage layer: for node v,
/// `h'_v = relu(W_self h_v + W_neigh sum_u A[v][u] h_u)`.
///
/// `node_features[v]` is F_in x T; the adjacency must be row-stochastic
/// over neighbors. Returns one F_g x T tensor per node.
pub fn graphsage_layer(
    node_features: &[Tensor],
    adjacency: &Tensor,
    params: &SageParams,
) -> Result<Vec<Tensor>> {
    let d = node_features.len();
    let (ar, ac) = adjacency.dims2()?;
    if ar != d || ac != d {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {ar}x{ac} for {d} nodes"
        )));
    }
    for (i, h) in node_features.iter().enumerate() {
        if h.shape() != node_features[0].shape() {
            return Err(Error::ShapeMismatch(format!(
                "node {i} features {:?} differ from {:?}",
                h.shape(),
                node_features[0].shape()
            )));
        }
    }
    let mut out = Vec::with_capacity(d);
    for v in 0..d {
        let mut neighbor = Tensor::zeros(node_features[0].shape());
        for u in 0..d {
            let w = adjacency.at2(v, u);
            if w != 0.0 {
                neighbor.axpy(w, &node_features[u])?;
            }
        }
        let pre = params
            .w_self
            .matmul(&node_features[v])?
            .add(&params.w_neigh.matmul(&neighbor)?)?;
        out.push(pre.map(|x| x.max(0.0)));
    }
    Ok(out)
}
