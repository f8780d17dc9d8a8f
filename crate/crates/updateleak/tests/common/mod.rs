#![allow(dead_code)]

use updateleak::corpus::{AttackCorpus, Provenance, Role, Targets};
use updateleak::data::ProbeSet;
use updateleak::victim::{build_classifier, train_classifier, Arch, ClassifierHandle, TrainSettings};
use updateleak_core::checkin::{synthesize_checkin_dataset, CheckinParams};
use updateleak_core::dataset::LabeledDataset;
use updateleak_core::posterior::ProbeFingerprint;
use updateleak_core::rng;
use rand::Rng;

pub const CLASSES: usize = 4;

/// A small check-in world: a trained MLP, its update pool and a probe set.
pub struct World {
    pub model: ClassifierHandle,
    pub pool: LabeledDataset,
    pub probe: ProbeSet,
}

pub fn world() -> World {
    let ds = synthesize_checkin_dataset(&CheckinParams::new(400, CLASSES, 3)).unwrap();
    let probe_idx: Vec<usize> = (0..10).collect();
    let pool_idx: Vec<usize> = (10..200).collect();
    let train_idx: Vec<usize> = (200..400).collect();
    let model = build_classifier(Arch::CheckinMlp, CLASSES, 1).unwrap();
    let settings = TrainSettings { epochs: 2, batch_size: 64, lr: 1e-3, seed: 1 };
    let model = train_classifier(&model, &ds.subset(&train_idx), &settings).unwrap();
    World {
        model,
        pool: ds.subset(&pool_idx),
        probe: ProbeSet::new(ds.subset(&probe_idx), &probe_idx),
    }
}

pub fn provenance() -> Provenance {
    Provenance {
        role: Role::Shadow,
        arch_id: "synthetic".into(),
        update_epochs: 1,
        sets_seed: 0,
        update_seed: 0,
        noise: None,
    }
}

/// Rows whose δ is a noisy one-hot code of the label, so the label is
/// linearly decodable.
pub fn label_corpus(n: usize, width: usize, classes: usize, seed: u64) -> AttackCorpus {
    let mut r = rng::stream(seed, 0);
    let mut deltas = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.random_range(0..classes);
        for j in 0..width {
            let signal = if j % classes == l { 0.5 } else { 0.0 };
            deltas.push(signal + r.random_range(-0.05f32..0.05));
        }
        labels.push(l as u32);
    }
    AttackCorpus::new(deltas, width, ProbeFingerprint(0), classes, vec![1; n], Targets::Labels(labels), provenance()).unwrap()
}
