//! Training-protocol integration properties: separability trend, leakage
//! freezing, and graph provenance.

use deepcsp::connectivity::Estimator;
use deepcsp::data::{synth_generate, SynthSpec};
use deepcsp::models::{ModelConfig, ModelKind};
use deepcsp::training::{evaluate, train, TrainConfig};

#[test]
fn top_eigenvalue_mean_trends_up_and_ends_high() {
    let mut spec = SynthSpec::new(6, 128, 128.0, 30);
    spec.profile_class0 = vec![6.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    spec.profile_class1 = vec![1.0, 6.0, 1.0, 1.0, 1.0, 1.0];
    spec.seed = 31;
    let (set, _) = synth_generate(&spec).unwrap();
    let mut model_cfg = ModelConfig::new(ModelKind::ShallowDeepCsp, 6, 128.0);
    model_cfg.temporal_filters = 2;
    model_cfg.hidden = 8;
    let cfg = TrainConfig {
        n_components: 1,
        batch_size: 16,
        epochs: 40,
        early_stop_patience: 40,
        seed: 31,
        ..TrainConfig::default()
    };
    let out = train(&set, &model_cfg, &cfg).unwrap();
    let means: Vec<f64> = out.history.iter().map(|r| r.eig_top_mean).collect();
    for w in means.windows(2) {
        assert!(
            w[1] >= w[0] - 0.02,
            "top-eigenvalue mean dipped from {} to {}",
            w[0],
            w[1]
        );
    }
    let last = *means.last().unwrap();
    assert!(last > 0.8, "final top-eigenvalue mean {last}");
}

#[test]
fn bank_and_graph_are_frozen_through_evaluation() {
    let mut spec = SynthSpec::new(4, 96, 64.0, 16);
    spec.seed = 32;
    spec.profile_class0 = vec![4.0, 1.0, 1.0, 1.0];
    spec.profile_class1 = vec![1.0, 4.0, 1.0, 1.0];
    let (set, _) = synth_generate(&spec).unwrap();
    let mut model_cfg = ModelConfig::new(ModelKind::ShallowGcn, 4, 64.0);
    model_cfg.sage_features = 2;
    model_cfg.hidden = 8;
    let cfg = TrainConfig {
        n_components: 1,
        batch_size: 8,
        epochs: 2,
        seed: 32,
        estimator: Estimator::Plv,
        ..TrainConfig::default()
    };
    let out = train(&set, &model_cfg, &cfg).unwrap();
    let bank_before = serde_json::to_string(&out.bank).unwrap();
    let graph_before = serde_json::to_string(&out.adjacency_meta.as_ref().unwrap().weights)
        .unwrap();
    let adjacency_before = serde_json::to_string(out.model.adjacency.as_ref().unwrap()).unwrap();
    let _ = evaluate(&out.model, &out.bank, &set).unwrap();
    assert_eq!(bank_before, serde_json::to_string(&out.bank).unwrap());
    assert_eq!(
        graph_before,
        serde_json::to_string(&out.adjacency_meta.as_ref().unwrap().weights).unwrap()
    );
    assert_eq!(
        adjacency_before,
        serde_json::to_string(out.model.adjacency.as_ref().unwrap()).unwrap()
    );
}
