mod common;

use rand::Rng;
use updateleak::attack::{estimate_distribution, infer_label, train_label_distribution, train_label_inference, AttackTraining};
use updateleak::corpus::{AttackCorpus, Targets};
use updateleak::data::DatasetName;
use updateleak::msr::{generate_candidates, reconstruct_multi, train_cbm_gan, ExtractSettings, GanSettings};
use updateleak::nn::vars_equal;
use updateleak::ssr::{assemble_and_train_ssr, reconstruct_single, train_autoencoder, AeArch, AeTraining};
use updateleak_core::checkin::{synthesize_checkin_dataset, CheckinParams};
use updateleak_core::metrics::{mse, one_to_one_oracle};
use updateleak_core::posterior::{DeltaVector, ProbeFingerprint};
use updateleak_core::{rng, SampleSet};

use common::{label_corpus, provenance};

fn training(epochs: usize, dropout: f32) -> AttackTraining {
    AttackTraining {
        epochs,
        dropout,
        val_fraction: 0.0,
        seed: 5,
        ..Default::default()
    }
}

fn dv(values: Vec<f32>) -> DeltaVector {
    DeltaVector::new(values, ProbeFingerprint(0))
}

#[test]
fn cross_entropy_falls_every_early_epoch_and_labels_are_learned() {
    let corpus = label_corpus(400, 40, 4, 1);
    let model = train_label_inference(&corpus, &training(6, 0.0)).unwrap();
    let losses = &model.report().train_loss;
    assert!(losses.windows(2).take(4).all(|w| w[1] < w[0]), "{losses:?}");
    let labels = corpus.labels().unwrap();
    let hits = (0..corpus.len())
        .filter(|&i| {
            let p = infer_label(&model, &dv(corpus.delta(i).to_vec())).unwrap();
            updateleak_core::metrics::argmax(&p) == labels[i] as usize
        })
        .count();
    assert!(hits as f64 / corpus.len() as f64 > 0.9, "{hits}");
}

#[test]
fn single_class_corpus_is_fit_exactly() {
    let c = label_corpus(100, 40, 4, 2);
    let one = AttackCorpus::new(c.deltas().to_vec(), 40, ProbeFingerprint(0), 4, vec![1; 100], Targets::Labels(vec![2; 100]), provenance()).unwrap();
    let model = train_label_inference(&one, &training(20, 0.5)).unwrap();
    let preds = model.predict_batch(one.deltas()).unwrap();
    assert!(preds.iter().all(|p| updateleak_core::metrics::argmax(p) == 2));
}

#[test]
fn uniform_targets_drive_kl_towards_zero_and_outputs_stay_on_the_simplex() {
    let c = label_corpus(200, 40, 4, 3);
    let uniform = AttackCorpus::new(c.deltas().to_vec(), 40, ProbeFingerprint(0), 4, vec![10; 200], Targets::Distributions(vec![vec![0.25; 4]; 200]), provenance()).unwrap();
    let model = train_label_distribution(&uniform, &training(60, 0.5)).unwrap();
    let mut r = rng::stream(9, 0);
    for _ in 0..20 {
        let d: Vec<f32> = (0..40).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let q = estimate_distribution(&model, &dv(d.clone())).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(q.iter().all(|&v| v >= 0.0));
        assert_eq!(q, estimate_distribution(&model, &dv(d)).unwrap());
    }
    let q = estimate_distribution(&model, &dv(c.delta(0).to_vec())).unwrap();
    let kl = updateleak_core::loss::kl_divergence(&[0.25; 4], &q).unwrap();
    assert!(kl < 0.01, "{kl}");
    assert!(estimate_distribution(&model, &dv(vec![0.0; 39])).is_err());
    assert!(train_label_inference(&uniform, &training(1, 0.5)).is_err());
}

#[test]
fn encoder_width_follows_the_probe_size_times_classes() {
    for (width, classes) in [(1000, 10), (800, 8)] {
        let c = label_corpus(20, width, classes, 4);
        let model = train_label_inference(&c, &training(1, 0.5)).unwrap();
        let mu = updateleak::attack::encode(model.encoder(), &dv(vec![0.1; width])).unwrap();
        assert_eq!(mu.len(), 64);
    }
}

fn checkin(n: usize, seed: u64) -> updateleak_core::dataset::LabeledDataset {
    synthesize_checkin_dataset(&CheckinParams::new(n, 4, seed)).unwrap()
}

fn samples_corpus(deltas: Vec<f32>, width: usize, samples: Vec<SampleSet>) -> AttackCorpus {
    let cards = samples.iter().map(SampleSet::len).collect();
    AttackCorpus::new(deltas, width, ProbeFingerprint(0), 4, cards, Targets::Samples(samples), provenance()).unwrap()
}

#[test]
fn autoencoder_beats_the_mean_sample() {
    let ds = checkin(600, 1);
    let ae = train_autoencoder(&ds, AeArch::Checkin, &AeTraining { epochs: 30, seed: 2, ..Default::default() }).unwrap();
    let dim = ds.feature_len();
    let mut mean = vec![0.0f32; dim];
    for i in 0..ds.len() {
        for (m, &x) in mean.iter_mut().zip(ds.sample(i)) {
            *m += x / ds.len() as f32;
        }
    }
    let mean_mse = (0..ds.len()).map(|i| mse(&mean, ds.sample(i)).unwrap()).sum::<f64>() / ds.len() as f64;
    let held = ae.heldout_mse().unwrap();
    assert!(held < mean_mse, "{held} vs {mean_mse}");
    let rec = ae.reconstruct(ds.samples()).unwrap();
    assert_eq!(rec.dim(), dim);
    assert_eq!(rec.len(), ds.len());
}

#[test]
fn ssr_fits_a_learnable_mapping_and_stays_in_unit_range() {
    let ds = checkin(400, 3);
    let ae = train_autoencoder(&ds, AeArch::Checkin, &AeTraining { epochs: 10, seed: 2, ..Default::default() }).unwrap();
    let dim = ds.feature_len();
    // δ is the sample itself, so the mapping is learnable.
    let corpus = samples_corpus(
        ds.features().to_vec(),
        dim,
        (0..ds.len()).map(|i| SampleSet::new(ds.sample(i).to_vec(), dim).unwrap()).collect(),
    );
    let model = assemble_and_train_ssr(&ae, &corpus, &training(5, 0.0)).unwrap();
    let losses = &model.report().train_loss;
    assert!(losses.windows(2).take(3).all(|w| w[1] < w[0]), "{losses:?}");
    for d in [vec![0.0; dim], vec![5.0; dim], ds.sample(0).to_vec()] {
        let x = reconstruct_single(&model, &dv(d)).unwrap();
        assert_eq!(x.len(), dim);
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(reconstruct_single(&model, &dv(vec![0.0; 3])).is_err());
}

#[test]
fn ssr_on_a_constant_target_converges_to_it() {
    let ds = checkin(300, 4);
    let ae = train_autoencoder(&ds, AeArch::Checkin, &AeTraining { epochs: 5, seed: 2, ..Default::default() }).unwrap();
    let target = ds.sample(7).to_vec();
    let mut r = rng::stream(1, 1);
    let deltas: Vec<f32> = (0..200 * 20).map(|_| r.random_range(-0.5f32..0.5)).collect();
    let corpus = samples_corpus(deltas, 20, vec![SampleSet::new(target.clone(), target.len()).unwrap(); 200]);
    let model = assemble_and_train_ssr(&ae, &corpus, &training(60, 0.0)).unwrap();
    let x = reconstruct_single(&model, &dv(corpus.delta(3).to_vec())).unwrap();
    let err = mse(&x, &target).unwrap();
    assert!(err < 2e-3, "{err}");
}

fn gan_settings(epochs: usize) -> GanSettings {
    GanSettings {
        width_scale: 0.25,
        epochs,
        seed: 3,
        ..GanSettings::for_dataset(DatasetName::Checkin)
    }
}

#[test]
fn gan_covers_a_fixed_three_sample_set() {
    let ds = checkin(50, 5);
    let dim = ds.feature_len();
    let truth = SampleSet::from_rows(&[ds.sample(0).to_vec(), ds.sample(20).to_vec(), ds.sample(40).to_vec()]).unwrap();
    let mut r = rng::stream(2, 0);
    let rows = 64;
    let deltas: Vec<f32> = (0..rows * 16).map(|_| r.random_range(-0.5f32..0.5)).collect();
    let corpus = samples_corpus(deltas, 16, vec![truth.clone(); rows]);
    let model = train_cbm_gan(&corpus, DatasetName::Checkin, &gan_settings(40)).unwrap();
    let delta = dv(corpus.delta(0).to_vec());
    let cands = generate_candidates(&model, &delta, 300, 1).unwrap();
    assert_eq!((cands.len(), cands.dim()), (300, dim));
    let one = one_to_one_oracle(&cands, &truth).unwrap();
    assert!(one < 5e-3, "{one}");
    let ex = ExtractSettings { n_gen: 300, kmeans_restarts: 3, silhouette_points: 300, seed: 1 };
    let (_, rec) = reconstruct_multi(&model, &delta, 3, &ex).unwrap();
    let matched = updateleak_core::metrics::matched_set_mse(&rec.finals, &truth).unwrap().mean;
    assert!(matched >= one - 1e-9);
}

#[test]
fn gan_training_and_sampling_are_seeded() {
    let ds = checkin(40, 6);
    let mut r = rng::stream(3, 0);
    let rows = 8;
    let deltas: Vec<f32> = (0..rows * 16).map(|_| r.random_range(-0.5f32..0.5)).collect();
    let sets = (0..rows)
        .map(|i| SampleSet::from_rows(&[ds.sample(i).to_vec(), ds.sample(i + 10).to_vec()]).unwrap())
        .collect();
    let corpus = samples_corpus(deltas, 16, sets);
    let a = train_cbm_gan(&corpus, DatasetName::Checkin, &gan_settings(1)).unwrap();
    let b = train_cbm_gan(&corpus, DatasetName::Checkin, &gan_settings(1)).unwrap();
    assert!(vars_equal(a.generator_vars(), b.generator_vars()).unwrap());
    assert!(vars_equal(a.discriminator_vars(), b.discriminator_vars()).unwrap());

    let delta = dv(corpus.delta(0).to_vec());
    let one = generate_candidates(&a, &delta, 1, 4).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(generate_candidates(&a, &delta, 50, 4).unwrap(), generate_candidates(&a, &delta, 50, 4).unwrap());
    assert_ne!(generate_candidates(&a, &delta, 50, 4).unwrap(), generate_candidates(&a, &delta, 50, 5).unwrap());
    assert!(generate_candidates(&a, &delta, 0, 4).is_err());

    let truth = &corpus.sample_sets().unwrap()[0];
    let mut last = f64::INFINITY;
    for n in [10, 40, 160] {
        let v = one_to_one_oracle(&generate_candidates(&a, &delta, n, 8).unwrap(), truth).unwrap();
        assert!(v <= last);
        last = v;
    }
}
