mod common;

use common::*;
use onn_core::network::Architecture;
use onn_core::spm::SpmConfig;
use onn_core::tasks::*;
use onn_core::FeatureMap;
use proptest::prelude::*;

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        architecture: Architecture::compact(3),
        spm: SpmConfig {
            iterations_per_session: 1,
            sessions: 2,
            ..Default::default()
        },
        runs: 1,
        seed: 4,
        ..Default::default()
    };
    cfg.train.iterations = 1;
    cfg
}

proptest! {
    #[test]
    fn normalize_is_idempotent(vals in prop::collection::vec(-1e3f64..1e3, 16)) {
        let m = FeatureMap::new(4, 4, vals).unwrap();
        prop_assume!(m.max() - m.min() > 1e-6);
        let once = normalize(&m).unwrap();
        prop_assert!((once.min() + 1.0).abs() < 1e-12 && (once.max() - 1.0).abs() < 1e-12);
        let twice = normalize(&once).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn snr_falls_as_noise_grows(seed in 0u64..1000, a in 0.01f64..1.0, b in 1.01f64..3.0) {
        let mut r = rng(seed);
        let t = random_map(&mut r, 8, 8);
        let n = random_map(&mut r, 8, 8);
        prop_assume!(n.variance() > 1e-9);
        let low = snr(&t, &FeatureMap::from_fn(8, 8, |i, j| t.get(i, j) + a * n.get(i, j))).unwrap();
        let high = snr(&t, &FeatureMap::from_fn(8, 8, |i, j| t.get(i, j) + a * b * n.get(i, j))).unwrap();
        prop_assert!(low > high);
    }
}

#[test]
fn snr_examples() {
    let t = FeatureMap::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
    assert_eq!(snr(&t, &t).unwrap(), f64::INFINITY);
    // an offset is not noise
    assert_eq!(snr(&t, &t.map(|v| v + 3.0)).unwrap(), f64::INFINITY);
    assert!((snr(&t, &t.map(|v| 0.9 * v)).unwrap() - 20.0).abs() < 1e-9);
    assert!(snr(&FeatureMap::from_fn(2, 2, |_, _| 1.0), &t).is_err());
}

#[test]
fn salt_pepper_corrupts_the_requested_fraction() {
    let clean = FeatureMap::from_fn(60, 60, |r, c| ((r + c) as f64 / 118.0) - 0.5);
    let mut total = 0.0;
    for seed in 0..100 {
        let noisy = salt_pepper(&clean, 0.4, &mut rng(seed)).unwrap();
        let changed = clean.as_slice().iter().zip(noisy.as_slice()).filter(|(a, b)| a != b).count();
        assert!(noisy.as_slice().iter().zip(clean.as_slice()).all(|(n, c)| n == c || n.abs() == 1.0));
        total += changed as f64 / 3600.0;
    }
    assert!((total / 100.0 - 0.4).abs() < 0.01);
    assert_eq!(salt_pepper(&clean, 0.0, &mut rng(1)).unwrap(), clean);
    assert!(salt_pepper(&clean, 1.5, &mut rng(1)).is_err());
}

#[test]
fn white_noise_is_normalized_and_centered() {
    let n = wgn(60, 60, &mut rng(2)).unwrap();
    assert!((n.min() + 1.0).abs() < 1e-12 && (n.max() - 1.0).abs() < 1e-12);
    let mean = n.as_slice().iter().sum::<f64>() / 3600.0;
    assert!(mean.abs() < 0.05);
    assert_ne!(n, wgn(60, 60, &mut rng(3)).unwrap());
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let a = Corpus::synthetic(5, 1);
    assert_eq!(a.len(), 5);
    assert_eq!(a.ids()[0], "syn0000");
    assert_eq!(a.images, Corpus::synthetic(5, 1).images);
    assert_ne!(a.images, Corpus::synthetic(5, 2).images);
    for (_, m) in &a.images {
        assert_eq!(m.shape(), (IMAGE_SIZE, IMAGE_SIZE));
        assert!(m.max() > m.min());
    }
}

#[test]
fn transform_pairs_include_an_inverse() {
    let imgs: Vec<_> = Corpus::synthetic(6, 3).images;
    let pairs = transform_pairs(&imgs).unwrap();
    assert_eq!(pairs.len(), 4);
    assert_eq!(pairs[0].input, pairs[1].target);
    assert_eq!(pairs[0].target, pairs[1].input);
}

#[test]
fn denoise_folds_are_disjoint() {
    let ids: Vec<String> = (0..20).map(|i| format!("i{i:02}")).collect();
    let spec = TaskSpec::new(TaskKind::Denoise);
    let plans = build_folds(&ids, &spec, 10, 0).unwrap();
    assert_eq!(plans.len(), 10);
    let mut seen: Vec<&String> = plans.iter().flat_map(|p| &p.train).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 20);
    for p in &plans {
        assert_eq!(p.train.len(), 2);
        assert_eq!(p.test.len(), 18);
        assert!(p.train.iter().all(|t| !p.test.contains(t)));
    }
    assert!(build_folds(&ids[..9], &spec, 1, 0).is_err());
}

#[test]
fn smoke_experiment_reports_every_candidate() {
    let corpus = Corpus::synthetic(10, 0);
    let spec = TaskSpec::new(TaskKind::Denoise);
    let report = run_experiment(&spec, &corpus, 1, &tiny_experiment()).unwrap();
    assert_eq!(report.folds.len(), 1);
    let fold = &report.folds[0];
    assert_eq!(fold.prior_iterations, 2);
    assert_eq!(fold.candidates.len(), 5);
    for c in &fold.candidates {
        assert!(c.train_snr().is_some_and(f64::is_finite));
        assert!(c.test_snr().is_some());
    }
    let csv = report.to_csv();
    assert!(csv.lines().any(|l| l.starts_with("1,train,")));
    assert!(csv.lines().any(|l| l.starts_with("mean,test,")));
    let again = run_experiment(&spec, &corpus, 1, &tiny_experiment()).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&report).unwrap());
}
