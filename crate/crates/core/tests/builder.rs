use std::path::PathBuf;

use machsim_core::consistency::toy::VoterPoolConfig;
use machsim_core::dataset::{build_dataset, label_pair, DatasetError, DirStore, MemoryStore, SamplerConfig};
use machsim_core::distortion::{psnr, Library};
use machsim_core::synthetic::{reference_image, reference_set};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        delta_db: 0.5,
        max_pairs_per_reference: None,
        rng_seed: seed,
    }
}

const TWO_NOISE_SPECS: &str = r#"
version = 1

[[spec]]
id = "noise_a"
family = "noise"
seed = 1
params = { kind = "gaussian", sigma = 6.0 }

[[spec]]
id = "noise_b"
family = "noise"
seed = 2
params = { kind = "gaussian", sigma = 6.0 }
"#;

#[test]
fn one_reference_two_variants_gives_one_record() {
    let library = Library::parse(TWO_NOISE_SPECS).unwrap();
    let voters = VoterPoolConfig::desk().build();
    let refs = vec![("only".to_owned(), reference_image(64, 64, 3))];
    let m = build_dataset(&refs, &library, &voters, &sampler(0), &MemoryStore::new()).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(m.records[0].vote_result.voters(), 3);
}

#[test]
fn nothing_within_tolerance_is_reported_as_empty_output() {
    let text = TWO_NOISE_SPECS.replacen("sigma = 6.0", "sigma = 30.0", 1);
    let library = Library::parse(&text).unwrap();
    let refs = vec![("only".to_owned(), reference_image(64, 64, 3))];
    let err = build_dataset(&refs, &library, &VoterPoolConfig::desk().build(), &sampler(0), &MemoryStore::new());
    assert!(matches!(err, Err(DatasetError::EmptyOutput)), "{err:?}");
}

#[test]
fn records_are_recomputable_and_files_exist() {
    let dir = tempfile::tempdir().unwrap();
    let library = Library::load(configs().join("desk_library.toml")).unwrap();
    let voters = VoterPoolConfig::load(configs().join("desk_voters.toml")).unwrap().build();
    let refs = reference_set(3, 64, 64, 11);
    let store = DirStore::new(dir.path());
    let m = build_dataset(&refs, &library, &voters, &sampler(4), &store).unwrap();
    assert!(!m.records.is_empty());
    for r in &m.records {
        let load = |p: &str| machsim_core::Image::load_png(dir.path().join(p)).unwrap();
        let (reference, a, b) = (load(&r.ref_path), load(&r.path_0), load(&r.path_1));
        // stored PSNRs match the stored images and respect the tolerance
        assert_eq!(psnr(&reference, &a).unwrap(), r.psnr_0);
        assert_eq!(psnr(&reference, &b).unwrap(), r.psnr_1);
        assert!((r.psnr_0 - r.psnr_1).abs() <= 0.5);
        assert_eq!(r.y, r.vote_result.soft_label);
        let k = r.vote_result.voters() as f64;
        assert_eq!((r.y * k).round() / k, r.y);

        // swapping the variants flips every vote that was not a tie
        let swapped = label_pair(&reference, &b, &a, &voters).unwrap();
        let ties = r.vote_result.per_voter.iter().filter(|v| v.d0 == v.d1).count() as f64;
        assert!((swapped.soft_label - (1.0 - r.y - ties / k)).abs() < 1e-12);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let library = Library::load(configs().join("desk_library.toml")).unwrap();
    let voters = VoterPoolConfig::desk().build();
    let refs = reference_set(4, 64, 64, 2);
    let run = || {
        build_dataset(&refs, &library, &voters, &sampler(8), &MemoryStore::new())
            .unwrap()
            .to_jsonl()
    };
    assert_eq!(run(), run());
}
