//! Binary model checkpoints.
//!
//! Layout: magic "DCSP", version u32, length-prefixed config JSON blob
//! (model config, fitted filter bank, and the frozen electrode graph for
//! the graph variant), then the parameter tensors in declaration order as
//! 32-bit little-endian floats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectivity::Estimator;
use crate::csp::SpatialFilterBank;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::numcore::Tensor;

const MAGIC: [u8; 4] = *b"DCSP";
const VERSION: u32 = 1;

/// Electrode-graph provenance stored alongside the normalized weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjacencyMeta {
    pub estimator: Estimator,
    pub band: (f64, f64),
    /// Row-major D x D row-stochastic weights.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    bank: SpatialFilterBank,
    adjacency: Option<AdjacencyMeta>,
}

fn parameter_tensors(model: &Model) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for b in &model.temporal {
        out.push(&b.weight);
        out.push(&b.bias);
    }
    if let Some(s) = &model.sage {
        out.push(&s.w_self);
        out.push(&s.w_neigh);
    }
    out.push(&model.classifier.w1);
    out.push(&model.classifier.b1);
    out.push(&model.classifier.w2);
    out.push(&model.classifier.b2);
    out
}

/// Serializes a trained model plus its filter bank.
pub fn checkpoint_bytes(
    model: &Model,
    bank: &SpatialFilterBank,
    adjacency_meta: Option<AdjacencyMeta>,
) -> Result<Vec<u8>> {
    let meta = CheckpointMeta { model: model.config.clone(), bank: bank.clone(), adjacency: adjacency_meta };
    let blob = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    for tensor in parameter_tensors(model) {
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes back into a model and its bank. Parameter
/// shapes come from the stored config; the payload must match exactly.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(Model, SpatialFilterBank)> {
    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::Truncated { needed: at + n - bytes.len(), available: bytes.len() - at.min(bytes.len()) })
        } else {
            Ok(())
        }
    };
    need(12, 0)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let blob_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(blob_len, 12)?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + blob_len])?;

    let mut model = Model::init(meta.model)?;
    if let Some(adj) = &meta.adjacency {
        let d = model.config.channels;
        if adj.weights.len() != d * d {
            return Err(Error::Inconsistent(format!(
                "adjacency has {} weights for {d} channels",
                adj.weights.len()
            )));
        }
        model.adjacency = Some(Tensor::new(vec![d, d], adj.weights.clone())?);
    }

    let mut pos = 12 + blob_len;
    {
        let mut targets: Vec<&mut Tensor> = Vec::new();
        for b in &mut model.temporal {
            targets.push(&mut b.weight);
            targets.push(&mut b.bias);
        }
        if let Some(s) = &mut model.sage {
            targets.push(&mut s.w_self);
            targets.push(&mut s.w_neigh);
        }
        targets.push(&mut model.classifier.w1);
        targets.push(&mut model.classifier.b1);
        targets.push(&mut model.classifier.w2);
        targets.push(&mut model.classifier.b2);
        for tensor in targets {
            let n = tensor.numel();
            need(n * 4, pos)?;
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                let raw: [u8; 4] = bytes[pos + i * 4..pos + i * 4 + 4].try_into().unwrap();
                *v = f32::from_le_bytes(raw) as f64;
            }
            pos += n * 4;
        }
    }
    if pos != bytes.len() {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after parameters",
            bytes.len() - pos
        )));
    }
    Ok((model, meta.bank))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    bank: &SpatialFilterBank,
    adjacency_meta: Option<AdjacencyMeta>,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, bank, adjacency_meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, SpatialFilterBank)> {
    read_checkpoint_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    fn quantized_model(kind: ModelKind) -> (Model, SpatialFilterBank) {
        let mut cfg = ModelConfig::new(kind, 3, 32.0);
        cfg.temporal_filters = 2;
        cfg.sage_features = 2;
        cfg.n_components = 2;
        let mut model = Model::init(cfg).unwrap();
        // pre-round so the f32 storage round-trips exactly
        for b in &mut model.temporal {
            b.weight = b.weight.cast(crate::numcore::DType::F32).cast(crate::numcore::DType::F64);
        }
        if let Some(s) = &mut model.sage {
            s.w_self = s.w_self.cast(crate::numcore::DType::F32).cast(crate::numcore::DType::F64);
            s.w_neigh =
                s.w_neigh.cast(crate::numcore::DType::F32).cast(crate::numcore::DType::F64);
        }
        model.classifier.w1 =
            model.classifier.w1.cast(crate::numcore::DType::F32).cast(crate::numcore::DType::F64);
        model.classifier.w2 =
            model.classifier.w2.cast(crate::numcore::DType::F32).cast(crate::numcore::DType::F64);
        if kind == ModelKind::ShallowGcn {
            let mut adj = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        adj.set2(i, j, 0.5);
                    }
                }
            }
            model.adjacency = Some(adj);
        }
        let rows = model.latent_rows();
        let bank = SpatialFilterBank {
            filters: Tensor::eye(rows)
                .matmul(&Tensor::eye(rows))
                .unwrap(),
            eigenvalues: vec![0.5; 2 * model.config.n_components],
            n_components: model.config.n_components,
        };
        // shrink the bank to rows x 2n
        let mut filters = Tensor::zeros(&[rows, 2 * model.config.n_components]);
        for j in 0..2 * model.config.n_components {
            filters.set2(j, j, 1.0);
        }
        let bank = SpatialFilterBank { filters, ..bank };
        (model, bank)
    }

    #[test]
    fn round_trip_dense_model() {
        let (model, bank) = quantized_model(ModelKind::ShallowDeepCsp);
        let bytes = checkpoint_bytes(&model, &bank, None).unwrap();
        let (back, back_bank) = read_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(model, back);
        assert_eq!(bank, back_bank);
        // writing again is byte-identical
        assert_eq!(bytes, checkpoint_bytes(&back, &back_bank, None).unwrap());
    }

    #[test]
    fn round_trip_graph_model_with_adjacency() {
        let (model, bank) = quantized_model(ModelKind::ShallowGcn);
        let meta = AdjacencyMeta {
            estimator: Estimator::Plv,
            band: (8.0, 30.0),
            weights: model.adjacency.as_ref().unwrap().data().to_vec(),
        };
        let bytes = checkpoint_bytes(&model, &bank, Some(meta)).unwrap();
        let (back, _) = read_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(model.adjacency, back.adjacency);
        assert_eq!(model.sage, back.sage);
    }

    #[test]
    fn malformed_checkpoints_are_typed_errors() {
        let (model, bank) = quantized_model(ModelKind::ShallowDeepCsp);
        let bytes = checkpoint_bytes(&model, &bank, None).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(read_checkpoint_bytes(&wrong), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_checkpoint_bytes(&ver), Err(Error::UnsupportedVersion(_))));
        assert!(matches!(
            read_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut padded = bytes;
        padded.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(read_checkpoint_bytes(&padded), Err(Error::Inconsistent(_))));
    }
}
