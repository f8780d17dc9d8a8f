//! Target and shadow classifiers: construction, training, the online update
//! and probing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use updateleak_core::dataset::LabeledDataset;
use updateleak_core::posterior::{posterior_difference, DeltaVector, PosteriorMatrix};

use crate::container::Container;
use crate::data::ProbeSet;
use crate::error::usage;
use crate::nn::{self, DEVICE};
use crate::{Error, Result};

/// Batch size of multi-sample updates.
pub const UPDATE_BATCH_SIZE: usize = 64;
const PROBE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MnistCnn,
    CifarCnn,
    CheckinMlp,
    CheckinMlpSmall,
}

impl Arch {
    pub fn id(self) -> &'static str {
        match self {
            Arch::MnistCnn => "mnist_cnn",
            Arch::CifarCnn => "cifar_cnn",
            Arch::CheckinMlp => "checkin_mlp",
            Arch::CheckinMlpSmall => "checkin_mlp_small",
        }
    }

    pub fn input_shape(self) -> &'static [usize] {
        match self {
            Arch::MnistCnn => &[1, 28, 28],
            Arch::CifarCnn => &[3, 32, 32],
            Arch::CheckinMlp | Arch::CheckinMlpSmall => &[168],
        }
    }

    pub fn input_len(self) -> usize {
        self.input_shape().iter().product()
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_cnn" => Ok(Arch::MnistCnn),
            "cifar_cnn" => Ok(Arch::CifarCnn),
            "checkin_mlp" => Ok(Arch::CheckinMlp),
            "checkin_mlp_small" => Ok(Arch::CheckinMlpSmall),
            other => Err(usage(format!("unknown architecture `{other}`"))),
        }
    }
}

/// One training or update run applied to a handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub init_seed: u64,
    pub optimizer: String,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub runs: Vec<TrainingRun>,
}

enum Net {
    Cnn {
        conv1: Conv2d,
        conv2: Conv2d,
        fcs: Vec<Linear>,
    },
    Mlp {
        fcs: Vec<Linear>,
    },
}

fn build_net(arch: Arch, num_classes: usize, vb: VarBuilder) -> candle_core::Result<Net> {
    let c = Conv2dConfig::default();
    Ok(match arch {
        Arch::MnistCnn => Net::Cnn {
            conv1: conv2d(1, 10, 5, c, vb.pp("conv1"))?,
            conv2: conv2d(10, 20, 5, c, vb.pp("conv2"))?,
            fcs: vec![
                linear(20 * 4 * 4, 50, vb.pp("fc1"))?,
                linear(50, num_classes, vb.pp("fc2"))?,
            ],
        },
        Arch::CifarCnn => Net::Cnn {
            conv1: conv2d(3, 6, 5, c, vb.pp("conv1"))?,
            conv2: conv2d(6, 16, 5, c, vb.pp("conv2"))?,
            fcs: vec![
                linear(16 * 5 * 5, 120, vb.pp("fc1"))?,
                linear(120, 84, vb.pp("fc2"))?,
                linear(84, num_classes, vb.pp("fc3"))?,
            ],
        },
        Arch::CheckinMlp => Net::Mlp {
            fcs: vec![
                linear(168, 32, vb.pp("fc1"))?,
                linear(32, 16, vb.pp("fc2"))?,
                linear(16, num_classes, vb.pp("fc3"))?,
            ],
        },
        Arch::CheckinMlpSmall => Net::Mlp {
            fcs: vec![
                linear(168, 16, vb.pp("fc1"))?,
                linear(16, num_classes, vb.pp("fc2"))?,
            ],
        },
    })
}

fn dense_stack(fcs: &[Linear], mut x: Tensor) -> candle_core::Result<Tensor> {
    for (i, fc) in fcs.iter().enumerate() {
        x = fc.forward(&x)?;
        if i + 1 < fcs.len() {
            x = x.relu()?;
        }
    }
    Ok(x)
}

impl Net {
    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Net::Cnn { conv1, conv2, fcs } => {
                let x = conv1.forward(x)?.max_pool2d(2)?.relu()?;
                let x = conv2.forward(&x)?.max_pool2d(2)?.relu()?;
                dense_stack(fcs, x.flatten_from(1)?)
            }
            Net::Mlp { fcs } => dense_stack(fcs, x.clone()),
        }
    }
}

/// A classifier with its own parameter store. Cloning deep-copies the
/// parameters, so training a clone never touches the original.
pub struct ClassifierHandle {
    arch: Arch,
    num_classes: usize,
    varmap: VarMap,
    net: Net,
    meta: TrainingMeta,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("arch", &self.arch)
            .field("num_classes", &self.num_classes)
            .field("meta", &self.meta)
            .finish()
    }
}

fn fresh(arch: Arch, num_classes: usize) -> Result<(VarMap, Net)> {
    let varmap = VarMap::new();
    let net = build_net(arch, num_classes, VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE))?;
    Ok((varmap, net))
}

impl Clone for ClassifierHandle {
    fn clone(&self) -> Self {
        self.try_clone().expect("cloning classifier parameters")
    }
}

impl ClassifierHandle {
    pub fn try_clone(&self) -> Result<Self> {
        let (varmap, net) = fresh(self.arch, self.num_classes)?;
        nn::copy_vars(&self.varmap, &varmap)?;
        Ok(Self {
            arch: self.arch,
            num_classes: self.num_classes,
            varmap,
            net,
            meta: self.meta.clone(),
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Class probabilities for a batch of flat samples.
    pub fn predict(&self, features: &[f32], n: usize) -> Result<Vec<f32>> {
        let mut dims = vec![n];
        dims.extend_from_slice(self.arch.input_shape());
        let x = Tensor::from_slice(features, dims, &DEVICE)?;
        let p = candle_nn::ops::softmax(&self.net.logits(&x)?, D::Minus1)?;
        nn::flat_f32(&p)
    }

    fn check_input(&self, ds: &LabeledDataset) -> Result<()> {
        if ds.shape() != self.arch.input_shape() {
            return Err(usage(format!(
                "{} expects samples of shape {:?}, got {:?}",
                self.arch,
                self.arch.input_shape(),
                ds.shape()
            )));
        }
        if ds.num_classes() > self.num_classes {
            return Err(usage(format!(
                "dataset has {} classes, model outputs {}",
                ds.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new("classifier", config_hash);
        c.set_meta("arch_id", self.arch.id());
        c.set_meta("num_classes", self.num_classes.to_string());
        c.set_meta("training_meta", serde_json::to_string(&self.meta).expect("meta serializes"));
        c.insert_vars("", &self.varmap)?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        Ok((Self::from_container(&c, path)?, c))
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.kind() != Some("classifier") {
            return Err(Error::format(path, "not a classifier checkpoint"));
        }
        let arch: Arch = c.meta("arch_id").unwrap_or_default().parse()?;
        let num_classes: usize = c
            .meta("num_classes")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "missing num_classes"))?;
        let meta: TrainingMeta = serde_json::from_str(c.meta("training_meta").unwrap_or("null"))
            .map_err(|e| Error::format(path, format!("training_meta: {e}")))?;
        let (varmap, net) = fresh(arch, num_classes)?;
        c.restore_vars("", &varmap, path)?;
        Ok(Self {
            arch,
            num_classes,
            varmap,
            net,
            meta,
        })
    }
}

/// Builds a classifier with deterministic initial weights.
pub fn build_classifier(arch: Arch, num_classes: usize, seed: u64) -> Result<ClassifierHandle> {
    if num_classes < 2 {
        return Err(usage("a classifier needs at least two classes"));
    }
    let (varmap, net) = fresh(arch, num_classes)?;
    nn::reseed(&varmap, seed)?;
    Ok(ClassifierHandle {
        arch,
        num_classes,
        varmap,
        net,
        meta: TrainingMeta {
            init_seed: seed,
            optimizer: "adam".into(),
            lr: nn::DEFAULT_LR,
            betas: nn::ADAM_BETAS,
            eps: nn::ADAM_EPS,
            runs: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

fn fit_classifier(model: &ClassifierHandle, data: &LabeledDataset, s: &TrainSettings, kind: &str) -> Result<ClassifierHandle> {
    if data.is_empty() {
        return Err(Error::Core(updateleak_core::Error::Config(format!("empty {kind} set"))));
    }
    model.check_input(data)?;
    let mut out = model.try_clone()?;
    out.meta.lr = s.lr;
    out.meta.runs.push(TrainingRun {
        kind: kind.into(),
        epochs: s.epochs,
        batch_size: s.batch_size,
        samples: data.len(),
        seed: s.seed,
    });
    if s.epochs == 0 {
        return Ok(out);
    }
    let dim = data.feature_len();
    let shape = model.arch.input_shape();
    let mut opt = nn::adam(nn::trainable(&out.varmap), s.lr)?;
    let mut rng = updateleak_core::rng::stream(s.seed, 0);
    for _ in 0..s.epochs {
        for batch in nn::batches(data.len(), s.batch_size, Some(&mut rng)) {
            let x = nn::gather_rows(data.features(), dim, &batch, shape)?;
            let y: Vec<u32> = batch.iter().map(|&i| data.label(i)).collect();
            let y = Tensor::new(y.as_slice(), &DEVICE)?;
            let loss = candle_nn::loss::cross_entropy(&out.net.logits(&x)?, &y)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
        }
    }
    Ok(out)
}

/// Trains a copy of `model` with cross-entropy and Adam; the input is left
/// untouched.
pub fn train_classifier(model: &ClassifierHandle, train: &LabeledDataset, settings: &TrainSettings) -> Result<ClassifierHandle> {
    fit_classifier(model, train, settings, "train")
}

/// The online update: continues training a copy of `model` on `update_set`
/// with a fresh optimizer, batch size 64 and the model's learning rate.
pub fn update_classifier(model: &ClassifierHandle, update_set: &LabeledDataset, update_epochs: usize, seed: u64) -> Result<ClassifierHandle> {
    let s = TrainSettings {
        epochs: update_epochs,
        batch_size: UPDATE_BATCH_SIZE,
        lr: model.meta.lr,
        seed,
    };
    fit_classifier(model, update_set, &s, "update")
}

/// Queries `model` with every probe sample, in probe order.
pub fn probe(model: &ClassifierHandle, probe: &ProbeSet) -> Result<PosteriorMatrix> {
    model.check_input(&probe.data)?;
    let dim = probe.data.feature_len();
    let mut values = Vec::with_capacity(probe.len() * model.num_classes);
    for chunk in probe.data.features().chunks(PROBE_CHUNK * dim) {
        values.extend(model.predict(chunk, chunk.len() / dim)?);
    }
    Ok(PosteriorMatrix::new(values, model.num_classes, probe.fingerprint)?)
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &ClassifierHandle, data: &LabeledDataset) -> Result<f64> {
    model.check_input(data)?;
    let dim = data.feature_len();
    let c = model.num_classes;
    let mut correct = 0usize;
    for (k, chunk) in data.features().chunks(PROBE_CHUNK * dim).enumerate() {
        let p = model.predict(chunk, chunk.len() / dim)?;
        for (j, row) in p.chunks(c).enumerate() {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            if pred as u32 == data.label(k * PROBE_CHUNK + j) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Posterior difference of two model versions on one probing set.
pub fn delta(before: &ClassifierHandle, after: &ClassifierHandle, probe_set: &ProbeSet) -> Result<DeltaVector> {
    Ok(posterior_difference(&probe(before, probe_set)?, &probe(after, probe_set)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, shape: Vec<usize>, classes: usize) -> LabeledDataset {
        let d: usize = shape.iter().product();
        let mut r = updateleak_core::rng::stream(9, 0);
        use rand::Rng as _;
        let f = (0..n * d).map(|_| r.random::<f32>()).collect();
        let l = (0..n).map(|i| (i % classes) as u32).collect();
        LabeledDataset::new(f, shape, l, classes).unwrap()
    }

    #[test]
    fn forward_shapes_per_arch() {
        for (arch, c) in [
            (Arch::MnistCnn, 10),
            (Arch::CifarCnn, 10),
            (Arch::CheckinMlp, 9),
            (Arch::CheckinMlpSmall, 8),
        ] {
            let m = build_classifier(arch, c, 1).unwrap();
            let x = vec![0.5f32; 3 * arch.input_len()];
            let p = m.predict(&x, 3).unwrap();
            assert_eq!(p.len(), 3 * c);
            for row in p.chunks(c) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_classifier(Arch::MnistCnn, 10, 4).unwrap();
        let b = build_classifier(Arch::MnistCnn, 10, 4).unwrap();
        let c = build_classifier(Arch::MnistCnn, 10, 5).unwrap();
        assert!(nn::vars_equal(a.varmap(), b.varmap()).unwrap());
        assert!(!nn::vars_equal(a.varmap(), c.varmap()).unwrap());
    }

    #[test]
    fn zero_epochs_is_a_no_op_and_update_leaves_input_alone() {
        let m = build_classifier(Arch::CheckinMlp, 8, 2).unwrap();
        let ds = toy(20, vec![168], 8);
        let s = TrainSettings {
            epochs: 0,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        };
        let t = train_classifier(&m, &ds, &s).unwrap();
        assert!(nn::vars_equal(m.varmap(), t.varmap()).unwrap());
        let u = update_classifier(&m, &ds.subset(&[3]), 1, 0).unwrap();
        assert!(!nn::vars_equal(m.varmap(), u.varmap()).unwrap());
        let again = build_classifier(Arch::CheckinMlp, 8, 2).unwrap();
        assert!(nn::vars_equal(m.varmap(), again.varmap()).unwrap());
    }

    #[test]
    fn shape_mismatch_and_empty_set_are_rejected() {
        let m = build_classifier(Arch::MnistCnn, 10, 2).unwrap();
        let s = TrainSettings {
            epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        };
        assert!(train_classifier(&m, &toy(4, vec![168], 8), &s).is_err());
        let empty = toy(0, vec![1, 28, 28], 10);
        let e = train_classifier(&m, &empty, &s).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = build_classifier(Arch::CifarCnn, 10, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("ul-victim-{}", std::process::id()));
        let path = dir.join("m.safetensors");
        m.save(&path, "h").unwrap();
        let (back, c) = ClassifierHandle::load(&path).unwrap();
        assert_eq!(c.config_hash(), Some("h"));
        assert_eq!(back.arch(), Arch::CifarCnn);
        assert!(nn::vars_equal(m.varmap(), back.varmap()).unwrap());
        std::fs::remove_dir_all(dir).ok();
    }
}
