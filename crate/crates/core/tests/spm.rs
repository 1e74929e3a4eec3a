mod common;

use common::*;
use onn_core::backprop::TrainConfig;
use onn_core::network::{Architecture, OnnModel};
use onn_core::spm::*;
use onn_core::{FeatureMap, OperatorConstants, OperatorSet, OperatorSubLibrary};
use proptest::prelude::*;
use rand::Rng;

const PUBLISHED_L2: [f64; 14] = [0.09, 0.22, 0.20, 0.18, 0.02, 0.13, 0.67, 0.04, 0.20, 0.17, 0.04, 0.00, 0.17, 0.23];

fn warm_ledger(hfs: &[f64]) -> HealthLedger {
    let twice = vec![hfs.to_vec()];
    let mut ledger = HealthLedger::from_final_hfs(OperatorSubLibrary::regression(), &twice).unwrap();
    let sets = ledger.library().sets().to_vec();
    for (&s, &h) in sets.iter().zip(hfs) {
        ledger.record(0, s, h).unwrap();
    }
    ledger
}

fn tiny_pairs(seed: u64, n: usize) -> Vec<(FeatureMap, FeatureMap)> {
    let mut r = rng(seed);
    (0..n).map(|_| (random_map(&mut r, 12, 12), random_map(&mut r, 12, 12))).collect()
}

#[test]
fn sampling_frequencies_follow_health() {
    let ledger = warm_ledger(&PUBLISHED_L2);
    assert!(ledger.is_warm(0));
    let total: f64 = PUBLISHED_L2.iter().sum();
    let mut r = rng(5);
    let draws = 100_000;
    let mut counts = [0usize; 14];
    for _ in 0..draws {
        counts[sample_operator(&ledger, 0, &mut r).index()] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        assert!((freq - PUBLISHED_L2[i] / total).abs() <= 0.01, "set {i}: {freq}");
    }
    assert_eq!(counts[11], 0);
}

#[test]
fn warmup_covers_every_set_first() {
    let lib = OperatorSubLibrary::regression();
    let mut ledger = HealthLedger::new(lib.clone(), 1, LedgerMeta {
        seed: 0,
        sessions: 0,
        iterations_per_session: 1,
        sublibrary: lib.ids(),
    });
    let mut r = rng(8);
    let first = reassign_layer(&ledger, 0, 12, &mut r);
    let mut distinct: Vec<usize> = first.iter().map(|s| s.index()).collect();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 12);
    for s in first {
        ledger.record(0, s, 0.1).unwrap();
    }
    let second = reassign_layer(&ledger, 0, 12, &mut r);
    let unseen: Vec<OperatorSet> = lib.sets().iter().copied().filter(|&s| ledger.count(0, s) == 0).collect();
    for s in &unseen {
        assert!(second.contains(s));
    }
}

#[test]
fn allocation_and_ranking_examples() {
    assert_eq!(allocate(&[0.67, 0.23, 0.22], 12).unwrap(), vec![8, 2, 2]);
    assert_eq!(allocate(&[1.0, 1.0, 1.0], 12).unwrap(), vec![4, 4, 4]);
    assert_eq!(allocate(&[0.5], 12).unwrap(), vec![12]);
    assert!(allocate(&[0.1, 0.1, 0.1], 2).is_err());
    let ledger = HealthLedger::from_final_hfs(OperatorSubLibrary::regression(), &[PUBLISHED_L2.to_vec()]).unwrap();
    let top: Vec<usize> = rank_operators(&ledger, 0).iter().take(3).map(|(s, _)| s.index()).collect();
    assert_eq!(top, vec![6, 13, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn allocation_sums_to_layer_size(
        hfs in prop::collection::vec(1e-6f64..10.0, 1..=3),
        n in 3usize..64,
        scale in 1e-3f64..1e3,
    ) {
        let counts = allocate(&hfs, n).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let total: f64 = hfs.iter().sum();
        prop_assert!(counts[0] as f64 >= (n as f64 * hfs[0] / total).floor());
        let scaled: Vec<f64> = hfs.iter().map(|h| h * scale).collect();
        let again = allocate(&scaled, n).unwrap();
        for (a, b) in counts.iter().zip(&again) {
            prop_assert!(a.abs_diff(*b) <= 1);
        }
    }
}

#[test]
fn session_accounting_and_replay() {
    let pairs = tiny_pairs(3, 2);
    let cfg = SpmConfig {
        iterations_per_session: 3,
        sessions: 5,
        seed: 9,
        weight_range: 0.3,
    };
    let out = prior_bp(
        &pairs,
        &OperatorSubLibrary::regression(),
        &cfg,
        &TrainConfig::default(),
        &Architecture::compact(3),
        OperatorConstants::default(),
        true,
    )
    .unwrap();
    assert_eq!(out.iterations, 15);
    assert_eq!(out.ledger.sessions(), 5);
    assert_eq!(out.sessions.len(), 5);

    let mut sums = vec![std::collections::BTreeMap::<usize, (usize, f64)>::new(); 2];
    for rec in out.sessions.iter().filter(|r| !r.diverged) {
        let start = OnnModel::from_checkpoint(&rec.start).unwrap();
        let end = OnnModel::from_checkpoint(&rec.end).unwrap();
        for sample in &rec.samples {
            let (l, k) = (sample.layer, sample.neuron);
            assert_eq!(start.set(l, k), sample.set);
            let (p0, p1) = (oracle_power(&start, l, k), oracle_power(&end, l, k));
            let hf = (p0 - p1).abs() / p0;
            assert!((hf - sample.hf).abs() <= 1e-12, "session {} l{l} k{k}", rec.session);
            let e = sums[l].entry(sample.set.index()).or_default();
            e.0 += 1;
            e.1 += sample.hf;
        }
    }
    for (l, layer) in sums.iter().enumerate() {
        for (&idx, &(count, sum)) in layer {
            let set = OperatorSet::from_index(idx).unwrap();
            assert_eq!(out.ledger.count(l, set), count);
            assert!((out.ledger.hf(l, set).unwrap() - sum / count as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn frozen_weights_give_zero_health() {
    let pairs = tiny_pairs(4, 1);
    let mut train = TrainConfig {
        lr0: 0.0,
        ..Default::default()
    };
    train.schedule.lr_min = -1.0;
    let cfg = SpmConfig {
        iterations_per_session: 2,
        sessions: 3,
        seed: 1,
        weight_range: 0.2,
    };
    let out = prior_bp(
        &pairs,
        &OperatorSubLibrary::regression(),
        &cfg,
        &train,
        &Architecture::compact(2),
        OperatorConstants::default(),
        false,
    )
    .unwrap();
    for l in 0..2 {
        assert!(out.ledger.total_samples(l) > 0);
        for &s in out.ledger.library().sets() {
            assert!(out.ledger.hf(l, s).is_none_or(|h| h == 0.0));
        }
    }
}

#[test]
fn default_prior_run_length() {
    let cfg = SpmConfig::default();
    assert_eq!((cfg.sessions, cfg.iterations_per_session), (30, 80));
    assert_eq!(cfg.total_iterations(), 2400);
}

#[test]
fn ledger_survives_json() {
    let mut r = rng(12);
    let hfs: Vec<Vec<f64>> = (0..2).map(|_| (0..14).map(|_| r.random_range(0.0..2.0)).collect()).collect();
    let ledger = HealthLedger::from_final_hfs(OperatorSubLibrary::regression(), &hfs).unwrap();
    let back = HealthLedger::from_json(&ledger.to_json().unwrap()).unwrap();
    assert_eq!(back, ledger);
}
