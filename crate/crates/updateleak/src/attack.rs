//! The posterior-difference encoder and the label-space attacks: label
//! inference for single-sample updates and label-distribution estimation for
//! multi-sample updates.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{linear, Linear, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};
use updateleak_core::loss::PROB_EPS;
use updateleak_core::posterior::DeltaVector;

use crate::container::Container;
use crate::corpus::{AttackCorpus, Targets};
use crate::error::usage;
use crate::nn::{self, FitConfig, FitReport, Mode, DEVICE};
use crate::{Error, Result};

/// Width of the latent code the encoder produces.
pub const LATENT_WIDTH: usize = 64;
const HIDDEN_WIDTH: usize = 128;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Two fully connected layers, δ → 128 → 64, LeakyReLU and dropout on both.
pub struct DeltaEncoder {
    fc1: Linear,
    fc2: Linear,
    input_len: usize,
    dropout: f32,
}

impl DeltaEncoder {
    pub fn new(input_len: usize, dropout: f32, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(input_len, HIDDEN_WIDTH, vb.pp("fc1"))?,
            fc2: linear(HIDDEN_WIDTH, LATENT_WIDTH, vb.pp("fc2"))?,
            input_len,
            dropout,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let x = candle_nn::ops::leaky_relu(&self.fc1.forward(x)?, LEAKY_SLOPE)?;
        let x = nn::dropout(&x, self.dropout, mode)?;
        let x = candle_nn::ops::leaky_relu(&self.fc2.forward(&x)?, LEAKY_SLOPE)?;
        nn::dropout(&x, self.dropout, mode)
    }

    pub fn check_width(&self, len: usize) -> Result<()> {
        if len != self.input_len {
            return Err(usage(format!(
                "posterior difference has length {len}, encoder expects {}",
                self.input_len
            )));
        }
        Ok(())
    }
}

/// The encoder's latent code μ for one δ.
pub fn encode(encoder: &DeltaEncoder, delta: &DeltaVector) -> Result<Vec<f32>> {
    encoder.check_width(delta.len())?;
    let x = Tensor::from_slice(delta.values(), (1, delta.len()), &DEVICE)?;
    nn::flat_f32(&encoder.forward(&x, &mut Mode::Eval)?)
}

/// Hyperparameters of attack-model training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackTraining {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f32,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AttackTraining {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            dropout: 0.5,
            val_fraction: 0.1,
            batch_size: 64,
            patience: 10,
            seed: 0,
        }
    }
}

impl AttackTraining {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            val_fraction: self.val_fraction,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelAttackKind {
    /// Label inference, trained with cross-entropy.
    Ali,
    /// Label-distribution estimation, trained with KL divergence.
    Alde,
}

impl LabelAttackKind {
    pub fn id(self) -> &'static str {
        match self {
            LabelAttackKind::Ali => "ali",
            LabelAttackKind::Alde => "alde",
        }
    }
}

/// Encoder plus a `FC(C)` + softmax decoder.
pub struct LabelAttack {
    kind: LabelAttackKind,
    varmap: VarMap,
    encoder: DeltaEncoder,
    decoder: Linear,
    num_classes: usize,
    training: AttackTraining,
    report: FitReport,
}

impl LabelAttack {
    fn build(kind: LabelAttackKind, input_len: usize, num_classes: usize, training: AttackTraining) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let encoder = DeltaEncoder::new(input_len, training.dropout, vb.pp("encoder"))?;
        let decoder = linear(LATENT_WIDTH, num_classes, vb.pp("decoder"))?;
        nn::reseed(&varmap, training.seed)?;
        Ok(Self {
            kind,
            varmap,
            encoder,
            decoder,
            num_classes,
            training,
            report: FitReport::default(),
        })
    }

    pub fn kind(&self) -> LabelAttackKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn encoder(&self) -> &DeltaEncoder {
        &self.encoder
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    fn logits(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        self.decoder.forward(&self.encoder.forward(x, mode)?)
    }

    /// Output distributions for a batch of flat deltas (rows of `delta_len`).
    pub fn predict_batch(&self, deltas: &[f32]) -> Result<Vec<Vec<f64>>> {
        let w = self.encoder.input_len();
        if deltas.len() % w != 0 {
            return Err(usage("delta batch is not a whole number of rows"));
        }
        let mut out = Vec::with_capacity(deltas.len() / w);
        for chunk in deltas.chunks(512 * w) {
            let x = Tensor::from_slice(chunk, (chunk.len() / w, w), &DEVICE)?;
            let p = candle_nn::ops::softmax(&self.logits(&x, &mut Mode::Eval)?, D::Minus1)?;
            let p = p.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(p);
        }
        Ok(out)
    }

    pub fn predict(&self, delta: &DeltaVector) -> Result<Vec<f64>> {
        self.encoder.check_width(delta.len())?;
        Ok(self.predict_batch(delta.values())?.remove(0))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new("attack", config_hash);
        c.set_meta("arch_id", self.kind.id());
        c.set_meta("input_len", self.encoder.input_len().to_string());
        c.set_meta("num_classes", self.num_classes.to_string());
        c.set_meta("training_meta", serde_json::to_string(&self.training).expect("serializes"));
        c.set_meta("val_loss", serde_json::to_string(&self.report.val_loss).expect("serializes"));
        c.insert_vars("", &self.varmap)?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        let kind = match c.meta("arch_id") {
            Some("ali") => LabelAttackKind::Ali,
            Some("alde") => LabelAttackKind::Alde,
            _ => return Err(Error::format(path, "not a label attack checkpoint")),
        };
        let num = |key: &str| -> Result<usize> {
            c.meta(key)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("missing {key}")))
        };
        let training: AttackTraining = serde_json::from_str(c.meta("training_meta").unwrap_or(""))
            .map_err(|e| Error::format(path, format!("training_meta: {e}")))?;
        let mut m = Self::build(kind, num("input_len")?, num("num_classes")?, training)?;
        c.restore_vars("", &m.varmap, path)?;
        m.report.val_loss = serde_json::from_str(c.meta("val_loss").unwrap_or("[]")).unwrap_or_default();
        Ok((m, c))
    }
}

fn delta_batch(corpus: &AttackCorpus, rows: &[usize]) -> Result<Tensor> {
    nn::gather_rows(corpus.deltas(), corpus.delta_len(), rows, &[corpus.delta_len()])
}

/// Mean over rows of `Σ q̂ log(q̂/q)` with both sides clamped at ε inside the
/// logarithms; `q̂` comes from `logits`.
pub fn kl_loss(logits: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let pred = candle_nn::ops::softmax(logits, D::Minus1)?;
    let log_pred = pred.clamp(PROB_EPS, 1.0)?.log()?;
    let log_target = target.clamp(PROB_EPS, 1.0)?.log()?;
    (pred * (log_pred - log_target)?)?.sum(D::Minus1)?.mean_all()
}

fn train(kind: LabelAttackKind, corpus: &AttackCorpus, training: &AttackTraining) -> Result<LabelAttack> {
    if corpus.is_empty() {
        return Err(Error::Core(updateleak_core::Error::Config("empty attack corpus".into())));
    }
    let mut model = LabelAttack::build(kind, corpus.delta_len(), corpus.num_classes(), *training)?;
    let c = corpus.num_classes();
    let report = match (kind, corpus.targets()) {
        (LabelAttackKind::Ali, Targets::Labels(labels)) => {
            let y = |rows: &[usize]| -> Result<Tensor> {
                let v: Vec<u32> = rows.iter().map(|&i| labels[i]).collect();
                Ok(Tensor::new(v.as_slice(), &DEVICE)?)
            };
            nn::fit(
                &model.varmap,
                corpus.len(),
                &training.fit_config(),
                |rows, mode| {
                    let logits = model.logits(&delta_batch(corpus, rows)?, mode)?;
                    Ok(candle_nn::loss::cross_entropy(&logits, &y(rows)?)?)
                },
                |rows| {
                    let logits = model.logits(&delta_batch(corpus, rows)?, &mut Mode::Eval)?;
                    let l = candle_nn::loss::cross_entropy(&logits, &y(rows)?)?;
                    Ok(nn::scalar(&l)? * rows.len() as f64)
                },
            )?
        }
        (LabelAttackKind::Alde, Targets::Distributions(dists)) => {
            let q = |rows: &[usize]| -> Result<Tensor> {
                let v: Vec<f32> = rows.iter().flat_map(|&i| dists[i].iter().map(|&p| p as f32)).collect();
                Ok(Tensor::from_vec(v, (rows.len(), c), &DEVICE)?)
            };
            nn::fit(
                &model.varmap,
                corpus.len(),
                &training.fit_config(),
                |rows, mode| {
                    let logits = model.logits(&delta_batch(corpus, rows)?, mode)?;
                    Ok(kl_loss(&logits, &q(rows)?)?)
                },
                |rows| {
                    let logits = model.logits(&delta_batch(corpus, rows)?, &mut Mode::Eval)?;
                    Ok(nn::scalar(&kl_loss(&logits, &q(rows)?)?)? * rows.len() as f64)
                },
            )?
        }
        (LabelAttackKind::Ali, _) => return Err(usage("label inference needs label targets")),
        (LabelAttackKind::Alde, _) => return Err(usage("distribution estimation needs distribution targets")),
    };
    model.report = report;
    Ok(model)
}

/// Trains the label-inference attack end to end with cross-entropy.
pub fn train_label_inference(corpus: &AttackCorpus, training: &AttackTraining) -> Result<LabelAttack> {
    train(LabelAttackKind::Ali, corpus, training)
}

/// Trains the label-distribution attack end to end with the KL objective.
pub fn train_label_distribution(corpus: &AttackCorpus, training: &AttackTraining) -> Result<LabelAttack> {
    train(LabelAttackKind::Alde, corpus, training)
}

/// Probability of each label for the single updating sample behind `delta`.
pub fn infer_label(model: &LabelAttack, delta: &DeltaVector) -> Result<Vec<f64>> {
    model.predict(delta)
}

/// Estimated label distribution of the updating set behind `delta`.
pub fn estimate_distribution(model: &LabelAttack, delta: &DeltaVector) -> Result<Vec<f64>> {
    model.predict(delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_through_zero_bias_encoder_is_zero() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let enc = DeltaEncoder::new(1000, 0.5, vb).unwrap();
        nn::reseed(&varmap, 3).unwrap();
        for (name, var) in varmap.data().lock().unwrap().iter() {
            if name.ends_with("bias") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let mu = encode(&enc, &DeltaVector::new(vec![0.0; 1000], updateleak_core::posterior::ProbeFingerprint(0))).unwrap();
        assert_eq!(mu, vec![0.0; LATENT_WIDTH]);
        assert!(encode(&enc, &DeltaVector::new(vec![0.0; 800], updateleak_core::posterior::ProbeFingerprint(0))).is_err());
    }

    #[test]
    fn kl_loss_matches_reference() {
        let logits = Tensor::new(&[[0.3f32, -1.0, 2.0], [0.0, 0.0, 0.0]], &DEVICE).unwrap();
        let target = Tensor::new(&[[0.5f32, 0.5, 0.0], [0.2, 0.3, 0.5]], &DEVICE).unwrap();
        let got = nn::scalar(&kl_loss(&logits, &target).unwrap()).unwrap();
        let p = nn::flat_f32(&candle_nn::ops::softmax(&logits, D::Minus1).unwrap()).unwrap();
        let t = nn::flat_f32(&target).unwrap();
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = (updateleak_core::loss::kl_divergence(&f(&p[..3]), &f(&t[..3])).unwrap()
            + updateleak_core::loss::kl_divergence(&f(&p[3..]), &f(&t[3..])).unwrap())
            / 2.0;
        assert!((got - want).abs() < 1e-4 * want.abs().max(1.0), "{got} vs {want}");
    }
}
