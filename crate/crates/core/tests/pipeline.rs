//! End to end: world, meta-training, checkpoints, meta-test and reports.

use std::fs;

use fspll_core::bench::{test_episode, Cell};
use fspll_core::episodes::{load_feature_dataset, FeaturePool};
use fspll_core::trainer::{write_run, NetworkConfig};
use fspll_core::{
    meta_test, meta_train, run_benchmark, sweep, write_report, BenchSpec, CorruptionSpec, Error, Method, NetworkParams,
    RectifyConfig, TrainConfig, WorldConfig,
};

fn small_train() -> TrainConfig {
    TrainConfig {
        max_epoch: 4,
        tasks: 3,
        ways: 4,
        shots: 3,
        query_shots: 4,
        corruption: CorruptionSpec { p: 1.0, r: 1 },
        lr: 0.05,
        network: NetworkConfig { hidden_dims: vec![8], output_dim: 6 },
        ..Default::default()
    }
}

fn small_world() -> WorldConfig {
    WorldConfig { classes: 14, dim: 5, sigma: 0.3, mean_scale: 1.0, train_classes: 8, dataset: None }
}

fn small_spec() -> BenchSpec {
    BenchSpec {
        seed: 9,
        world: small_world(),
        train: small_train(),
        ways: vec![4],
        shots: vec![3],
        r: vec![0, 1],
        rounds: 6,
        methods: Method::ALL.to_vec(),
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let split = small_world().build(1).unwrap();
    let (params, log) = meta_train(&small_train(), split.pool.as_ref(), &split.train, 2).unwrap();
    assert_eq!(log.epochs.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &small_train(), &log, &params, false).unwrap();
    let loaded = NetworkParams::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(loaded, params);
    let log_csv = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log_csv.lines().count(), 5);

    let cell = Cell { ways: 4, shots: 3, p: 1.0, r: 1 };
    let ep = test_episode(split.pool.as_ref(), &split.test, &cell, 5, 3, 0, 0).unwrap();
    assert!(ep.class_ids.iter().all(|c| split.test.contains(c)));
    let a = meta_test(&params, &ep, &RectifyConfig::default()).unwrap();
    let b = meta_test(&loaded, &ep, &RectifyConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn benchmark_pairs_methods_and_writes_reports() {
    let spec = small_spec();
    let result = run_benchmark(&spec).unwrap();
    assert_eq!(result.cells.len(), 2);
    for cell in &result.cells {
        assert_eq!(cell.methods.len(), 5);
        assert_eq!(cell.episode_hashes.len(), 6);
        for m in &cell.methods {
            assert_eq!(m.accuracies.len(), 6);
            assert!(m.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }
    // on clean cells rectification of singleton candidates is plain prototypes,
    // so the clean-trained variants coincide
    let clean = &result.cells[0];
    assert_eq!(clean.cell.r, 0);
    assert_eq!(clean.method("fspll-plus").unwrap().accuracies, clean.method("pn-plus").unwrap().accuracies);

    let dir = tempfile::tempdir().unwrap();
    write_report(&result, &spec, dir.path()).unwrap();
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().next(), Some("cell,method,round,accuracy"));
    assert_eq!(rounds.lines().count(), 1 + 2 * 5 * 6);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 5);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], result.config_hash);
    assert_eq!(meta["std"], "population");

    assert_eq!(run_benchmark(&spec).unwrap(), result);
}

#[test]
fn sweep_shares_checkpoint_and_episodes() {
    let spec = BenchSpec {
        r: vec![1],
        methods: vec![Method::Fspll],
        sweep: Some(fspll_core::bench::SweepSpec { axis: fspll_core::bench::SweepAxis::Lambda, values: vec![0.0, 0.5] }),
        ..small_spec()
    };
    let swept = sweep(&spec).unwrap();
    let labels: Vec<&str> = swept.cells[0].methods.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(labels, ["fspll@lambda=0", "fspll@lambda=0.5"]);

    // the lambda=0.5 entry is the plain fspll pipeline
    let plain = run_benchmark(&BenchSpec { sweep: None, ..spec.clone() }).unwrap();
    assert_eq!(swept.cells[0].methods[1].accuracies, plain.cells[0].methods[0].accuracies);
    assert_eq!(swept.cells[0].episode_hashes, plain.cells[0].episode_hashes);
}

#[test]
fn feature_file_world() {
    let generated = small_world().generate(4).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut records = Vec::new();
    for class in 0..14 {
        for x in fspll_core::episodes::ClassPool::draw(&generated, class, 24, &mut rng).unwrap() {
            records.push((class as u64, x));
        }
    }
    let pool = FeaturePool::from_records(5, records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    pool.write_csv(&path).unwrap();
    assert_eq!(load_feature_dataset(&path).unwrap(), pool);

    let spec = BenchSpec {
        world: WorldConfig { dataset: Some(path), ..small_world() },
        r: vec![1],
        methods: vec![Method::Fspll, Method::Pn],
        ..small_spec()
    };
    let result = run_benchmark(&spec).unwrap();
    assert_eq!(result.cells[0].methods.len(), 2);
}

#[test]
fn unknown_method_is_reported() {
    let err = serde_json::from_str::<BenchSpec>(r#"{"methods": ["fspll", "maml"]}"#).unwrap_err();
    assert!(err.to_string().contains("maml"), "{err}");
    assert!(matches!("maml".parse::<Method>(), Err(Error::UnknownMethod { .. })));
}
