//! Small end-to-end run: build pairs, train the head, evaluate on held-out
//! references.

use std::path::PathBuf;

use machsim_core::backbone::{Backbone, SyntheticEncoder};
use machsim_core::consistency::toy::VoterPoolConfig;
use machsim_core::dataset::{build_dataset, DatasetStats, MemoryStore, SamplerConfig};
use machsim_core::distortion::Library;
use machsim_core::eval::{evaluate, LearnedMetric, PsnrMetric};
use machsim_core::metric::MetricParams;
use machsim_core::synthetic::reference_set;
use machsim_core::trainer::{holdout, train, TrainConfig};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn desk_run_separates_families() {
    let refs = reference_set(20, 64, 64, 7);
    let library = Library::load(configs().join("desk_library.toml")).unwrap();
    let voters = VoterPoolConfig::load(configs().join("desk_voters.toml")).unwrap().build();
    let store = MemoryStore::new();
    let cfg = SamplerConfig {
        delta_db: 0.5,
        max_pairs_per_reference: None,
        rng_seed: 1,
    };
    let manifest = build_dataset(&refs, &library, &voters, &cfg, &store).unwrap();
    let stats = DatasetStats::from_manifest(&manifest);
    assert!(manifest.records.len() - stats.ties >= 50);

    let pairs = manifest.labeled_pairs();
    let tc = TrainConfig::default();
    let (rest, test) = holdout(&pairs, tc.test_fraction, tc.rng_seed);
    let backbone = SyntheticEncoder::default();
    let before = backbone.param_checksum();
    let report = train(&rest, &store, &backbone, None, &MetricParams::new(12), &tc).unwrap();
    assert_eq!(before, backbone.param_checksum());
    assert!(report.final_val_accuracy() >= 0.95);
    assert!(report.epochs[4].train_loss <= report.epochs[0].train_loss);

    let learned = LearnedMetric::new("learned", std::sync::Arc::new(backbone), report.final_params.clone());
    let ours = evaluate(&learned, &test, &store).unwrap();
    let base = evaluate(&PsnrMetric, &test, &store).unwrap();
    assert!(ours.accuracy > base.accuracy);
}
