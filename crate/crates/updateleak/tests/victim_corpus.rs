mod common;

use proptest::prelude::*;
use updateleak::corpus::{build_corpus, AttackCorpus, CorpusOptions, Projection, Role, Targets};
use updateleak::data::ProbeSet;
use updateleak::defense::noisy_probe;
use updateleak::victim::{delta, probe, update_classifier};
use updateleak_core::dataset::{sample_updating_sets, UpdatingSetBatch};
use updateleak_core::noise::NoisePolicy;
use updateleak_core::posterior::ProbeFingerprint;

use common::{world, CLASSES};

fn opts(update_epochs: usize) -> CorpusOptions {
    CorpusOptions {
        role: Role::Shadow,
        update_epochs,
        sets_seed: 3,
        update_seed: 4,
        noise: None,
    }
}

#[test]
fn delta_of_a_model_with_itself_is_zero_and_sized_probe_times_classes() {
    let w = world();
    let d = delta(&w.model, &w.model, &w.probe).unwrap();
    assert_eq!(d.len(), 10 * CLASSES);
    assert!(d.values().iter().all(|&v| v == 0.0));
}

#[test]
fn update_leaves_the_base_model_alone_and_deltas_stay_bounded() {
    let w = world();
    let before = probe(&w.model, &w.probe).unwrap();
    let set = w.pool.subset(&(0..20).collect::<Vec<_>>());
    let updated = update_classifier(&w.model, &set, 3, 9).unwrap();
    assert_eq!(probe(&w.model, &w.probe).unwrap(), before);
    let d = delta(&w.model, &updated, &w.probe).unwrap();
    assert!(d.values().iter().any(|&v| v != 0.0));
    assert!(d.values().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn probing_ignores_how_the_probe_set_is_split() {
    let w = world();
    let whole = probe(&w.model, &w.probe).unwrap();
    for cut in [1, 4, 9] {
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..w.probe.len()).collect();
        let a = probe(&w.model, &ProbeSet::new(w.probe.data.subset(&head), &head)).unwrap();
        let b = probe(&w.model, &ProbeSet::new(w.probe.data.subset(&tail), &tail)).unwrap();
        let joined: Vec<f32> = a.values().iter().chain(b.values()).copied().collect();
        // Row results agree up to the rounding of differently blocked matrix products.
        let gap = joined.iter().zip(whole.values()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(gap <= 1e-6, "cut {cut}: max gap {gap:e}");
    }
}

#[test]
fn corpus_is_bit_reproducible_and_shares_one_before_probe() {
    let w = world();
    let batch = sample_updating_sets(w.pool.len(), 3, 6, 11).unwrap();
    let a = build_corpus(&w.model, &w.pool, &w.probe, &batch, &opts(1)).unwrap();
    let b = build_corpus(&w.model, &w.pool, &w.probe, &batch, &opts(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_eq!(a.delta_len(), 10 * CLASSES);
    assert_eq!(a.fingerprint(), probe(&w.model, &w.probe).unwrap().fingerprint());
    assert_eq!(a.cardinality(), Some(3));
    // Row i is δ against the single before-probe of the base model.
    let before = probe(&w.model, &w.probe).unwrap();
    let set = w.pool.subset(&batch.sets[0]);
    let seed = updateleak_core::rng::derive(4, "update");
    let after = probe(&update_classifier(&w.model, &set, 1, seed).unwrap(), &w.probe).unwrap();
    let expected: Vec<f32> = before.values().iter().zip(after.values()).map(|(x, y)| x - y).collect();
    assert_eq!(a.delta(0), expected.as_slice());
}

#[test]
fn zero_epoch_updates_give_zero_deltas() {
    let w = world();
    let batch = sample_updating_sets(w.pool.len(), 1, 2, 5).unwrap();
    let c = build_corpus(&w.model, &w.pool, &w.probe, &batch, &opts(0)).unwrap();
    assert!(c.deltas().iter().all(|&v| v == 0.0));
}

#[test]
fn projections_follow_the_members() {
    let w = world();
    let batch = sample_updating_sets(w.pool.len(), 1, 5, 2).unwrap();
    let c = build_corpus(&w.model, &w.pool, &w.probe, &batch, &opts(1)).unwrap();
    let labels = c.project_targets(Projection::Label, &w.pool).unwrap();
    let dists = c.project_targets(Projection::Distribution, &w.pool).unwrap();
    let samples = c.project_targets(Projection::Samples, &w.pool).unwrap();
    for (i, set) in batch.sets.iter().enumerate() {
        let l = w.pool.label(set[0]);
        assert_eq!(labels.labels().unwrap()[i], l);
        let mut onehot = vec![0.0; CLASSES];
        onehot[l as usize] = 1.0;
        assert_eq!(dists.distributions().unwrap()[i], onehot);
        assert_eq!(samples.sample_sets().unwrap()[i].row(0), w.pool.sample(set[0]));
    }
}

#[test]
fn distribution_of_a_balanced_set_is_normalized() {
    let w = world();
    let zeros: Vec<usize> = (0..w.pool.len()).filter(|&i| w.pool.label(i) == 0).take(5).collect();
    let ones: Vec<usize> = (0..w.pool.len()).filter(|&i| w.pool.label(i) == 1).take(5).collect();
    assert_eq!((zeros.len(), ones.len()), (5, 5));
    let batch = UpdatingSetBatch {
        sets: vec![zeros.into_iter().chain(ones).collect()],
        cardinality: 10,
    };
    let c = build_corpus(&w.model, &w.pool, &w.probe, &batch, &opts(1)).unwrap();
    let d = c.project_targets(Projection::Distribution, &w.pool).unwrap();
    assert_eq!(d.distributions().unwrap()[0], vec![0.5, 0.5, 0.0, 0.0]);
    let err = c.project_targets(Projection::Label, &w.pool).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn corpus_survives_a_round_trip_and_concatenation_tags_cardinality() {
    let w = world();
    let one = sample_updating_sets(w.pool.len(), 1, 3, 7).unwrap();
    let five = sample_updating_sets(w.pool.len(), 5, 2, 8).unwrap();
    let a = build_corpus(&w.model, &w.pool, &w.probe, &one, &opts(1)).unwrap();
    let b = build_corpus(&w.model, &w.pool, &w.probe, &five, &opts(1)).unwrap();
    let mixed = AttackCorpus::concat(&[a, b]).unwrap();
    assert_eq!(mixed.cardinalities(), &[1, 1, 1, 5, 5]);
    assert_eq!(mixed.cardinality(), None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.st");
    mixed.save(&path, "h").unwrap();
    let (back, c) = AttackCorpus::load(&path).unwrap();
    assert_eq!(back, mixed);
    assert_eq!(c.config_hash(), Some("h"));
    assert!(matches!(back.targets(), Targets::Sets(_)));
}

#[test]
fn noisy_probing_at_scale_zero_is_plain_probing() {
    let w = world();
    let plain = probe(&w.model, &w.probe).unwrap();
    let zero = noisy_probe(&w.model, &w.probe, &NoisePolicy::new(0.0, 1).unwrap(), 0).unwrap();
    assert_eq!(zero, plain);
    assert!(noisy_probe(&w.model, &w.probe, &NoisePolicy { scale: -0.1, renormalize: true, seed: 1 }, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn noisy_rows_stay_on_the_simplex_and_repeat_per_seed(scale in 0.0f32..0.5, seed in any::<u64>(), query in 0u64..100) {
        let w = world();
        let policy = NoisePolicy::new(scale, seed).unwrap();
        let a = noisy_probe(&w.model, &w.probe, &policy, query).unwrap();
        let b = noisy_probe(&w.model, &w.probe, &policy, query).unwrap();
        prop_assert_eq!(&a, &b);
        for row in a.rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        prop_assert_ne!(a.fingerprint(), ProbeFingerprint(0));
    }
}
