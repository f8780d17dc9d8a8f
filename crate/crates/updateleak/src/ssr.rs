//! Single-sample reconstruction: an autoencoder is pretrained on shadow
//! data, its decoder is transplanted behind the δ-encoder and a bridge
//! layer, and the whole stack is fine-tuned on (δ, sample) pairs.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{
    batch_norm, conv2d, conv_transpose2d, linear, BatchNorm, Conv2d, Conv2dConfig, ConvTranspose2d,
    ConvTranspose2dConfig, Linear, Module, ModuleT, VarBuilder, VarMap,
};
use serde::{Deserialize, Serialize};
use updateleak_core::dataset::LabeledDataset;
use updateleak_core::posterior::DeltaVector;
use updateleak_core::SampleSet;

use crate::attack::{AttackTraining, DeltaEncoder, LATENT_WIDTH};
use crate::container::Container;
use crate::corpus::AttackCorpus;
use crate::data::DatasetName;
use crate::error::usage;
use crate::nn::{self, FitConfig, FitReport, Mode, DEVICE};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Maps a tanh output from [-1, 1] to the [0, 1] feature range.
pub fn to_unit_range(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.tanh()? + 1.0)? * 0.5
}

fn fc_block(fc: &Linear, bn: &BatchNorm, x: &Tensor, p: f32, mode: &mut Mode) -> candle_core::Result<Tensor> {
    let x = bn.forward_t(&fc.forward(x)?, mode.is_train())?.elu(1.0)?;
    nn::dropout(&x, p, mode)
}

enum EncoderNet {
    Conv {
        conv1: Conv2d,
        conv2: Conv2d,
        fc1: Linear,
        fc2: Linear,
    },
    Dense {
        fcs: [Linear; 4],
        bns: [BatchNorm; 3],
    },
}

enum DecoderNet {
    Conv {
        fc1: Linear,
        fc2: Linear,
        grid: [usize; 3],
        convts: [ConvTranspose2d; 3],
    },
    Dense {
        fcs: [Linear; 4],
        bns: [BatchNorm; 3],
    },
}

/// Autoencoder geometry for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeArch {
    Mnist,
    Cifar10,
    Checkin,
}

impl AeArch {
    pub fn for_dataset(d: DatasetName) -> Self {
        match d {
            DatasetName::Mnist => AeArch::Mnist,
            DatasetName::Cifar10 => AeArch::Cifar10,
            DatasetName::Checkin => AeArch::Checkin,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            AeArch::Mnist => "ae_mnist",
            AeArch::Cifar10 => "ae_cifar10",
            AeArch::Checkin => "ae_checkin",
        }
    }

    pub fn sample_shape(self) -> &'static [usize] {
        match self {
            AeArch::Mnist => &[1, 28, 28],
            AeArch::Cifar10 => &[3, 32, 32],
            AeArch::Checkin => &[168],
        }
    }

    pub fn sample_len(self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn latent_width(self) -> usize {
        match self {
            AeArch::Mnist => 10,
            AeArch::Cifar10 => 30,
            AeArch::Checkin => 16,
        }
    }
}

fn ct(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize, output_padding: usize, vb: VarBuilder) -> candle_core::Result<ConvTranspose2d> {
    let cfg = ConvTranspose2dConfig {
        padding,
        output_padding,
        stride,
        dilation: 1,
    };
    conv_transpose2d(in_c, out_c, k, cfg, vb)
}

fn build_encoder(arch: AeArch, vb: VarBuilder) -> candle_core::Result<EncoderNet> {
    let c = Conv2dConfig::default();
    Ok(match arch {
        AeArch::Mnist => EncoderNet::Conv {
            conv1: conv2d(1, 16, 3, c, vb.pp("conv1"))?,
            conv2: conv2d(16, 8, 3, c, vb.pp("conv2"))?,
            fc1: linear(8 * 5 * 5, 15, vb.pp("fc1"))?,
            fc2: linear(15, 10, vb.pp("fc2"))?,
        },
        AeArch::Cifar10 => EncoderNet::Conv {
            conv1: conv2d(3, 32, 3, c, vb.pp("conv1"))?,
            conv2: conv2d(32, 16, 3, c, vb.pp("conv2"))?,
            fc1: linear(16 * 6 * 6, 50, vb.pp("fc1"))?,
            fc2: linear(50, 30, vb.pp("fc2"))?,
        },
        AeArch::Checkin => EncoderNet::Dense {
            fcs: [
                linear(168, 64, vb.pp("fc1"))?,
                linear(64, 32, vb.pp("fc2"))?,
                linear(32, 16, vb.pp("fc3"))?,
                linear(16, 16, vb.pp("fc4"))?,
            ],
            bns: [
                batch_norm(64, BN_EPS, vb.pp("bn1"))?,
                batch_norm(32, BN_EPS, vb.pp("bn2"))?,
                batch_norm(16, BN_EPS, vb.pp("bn3"))?,
            ],
        },
    })
}

// Strides and paddings are not part of the published layer list; these are
// the smallest choices that land exactly on the sample size:
// MNIST 2×4×4 → 10 → 14 → 28, CIFAR 4×4×4 → 12 → 16 → 32.
fn build_decoder(arch: AeArch, vb: VarBuilder) -> candle_core::Result<DecoderNet> {
    Ok(match arch {
        AeArch::Mnist => DecoderNet::Conv {
            fc1: linear(10, 15, vb.pp("fc1"))?,
            fc2: linear(15, 32, vb.pp("fc2"))?,
            grid: [2, 4, 4],
            convts: [
                ct(2, 16, 3, 2, 0, 1, vb.pp("convt1"))?,
                ct(16, 8, 5, 1, 0, 0, vb.pp("convt2"))?,
                ct(8, 1, 2, 2, 0, 0, vb.pp("convt3"))?,
            ],
        },
        AeArch::Cifar10 => DecoderNet::Conv {
            fc1: linear(30, 50, vb.pp("fc1"))?,
            fc2: linear(50, 64, vb.pp("fc2"))?,
            grid: [4, 4, 4],
            convts: [
                ct(4, 32, 3, 3, 0, 0, vb.pp("convt1"))?,
                ct(32, 16, 5, 1, 0, 0, vb.pp("convt2"))?,
                ct(16, 3, 4, 2, 1, 0, vb.pp("convt3"))?,
            ],
        },
        AeArch::Checkin => DecoderNet::Dense {
            fcs: [
                linear(16, 16, vb.pp("fc1"))?,
                linear(16, 32, vb.pp("fc2"))?,
                linear(32, 64, vb.pp("fc3"))?,
                linear(64, 168, vb.pp("fc4"))?,
            ],
            bns: [
                batch_norm(16, BN_EPS, vb.pp("bn1"))?,
                batch_norm(32, BN_EPS, vb.pp("bn2"))?,
                batch_norm(64, BN_EPS, vb.pp("bn3"))?,
            ],
        },
    })
}

/// Sample → latent code.
pub struct AeEncoder {
    net: EncoderNet,
    arch: AeArch,
    dropout: f32,
}

impl AeEncoder {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        match &self.net {
            EncoderNet::Conv { conv1, conv2, fc1, fc2 } => {
                let mut dims = vec![x.dim(0)?];
                dims.extend_from_slice(self.arch.sample_shape());
                let x = x.reshape(dims)?;
                let x = conv1.forward(&x)?.max_pool2d(2)?.relu()?;
                let x = conv2.forward(&x)?.max_pool2d(2)?.relu()?;
                let x = fc1.forward(&x.flatten_from(1)?)?.relu()?;
                let x = nn::dropout(&x, self.dropout, mode)?;
                fc2.forward(&x)?.relu()
            }
            EncoderNet::Dense { fcs, bns } => {
                let mut x = x.clone();
                for (fc, bn) in fcs.iter().zip(bns) {
                    x = fc_block(fc, bn, &x, self.dropout, mode)?;
                }
                fcs[3].forward(&x)?.elu(1.0)
            }
        }
    }
}

/// Latent code → flat sample in [0, 1].
pub struct AeDecoder {
    net: DecoderNet,
    dropout: f32,
}

impl AeDecoder {
    pub fn forward(&self, z: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let out = match &self.net {
            DecoderNet::Conv { fc1, fc2, grid, convts } => {
                let x = fc1.forward(z)?.relu()?;
                let x = fc2.forward(&x)?.relu()?;
                let x = nn::dropout(&x, self.dropout, mode)?;
                let mut x = x.reshape((x.dim(0)?, grid[0], grid[1], grid[2]))?;
                for (i, c) in convts.iter().enumerate() {
                    x = c.forward(&x)?;
                    if i + 1 < convts.len() {
                        x = x.relu()?;
                    }
                }
                x.flatten_from(1)?
            }
            DecoderNet::Dense { fcs, bns } => {
                let mut x = z.clone();
                for (fc, bn) in fcs.iter().zip(bns) {
                    x = fc_block(fc, bn, &x, self.dropout, mode)?;
                }
                fcs[3].forward(&x)?
            }
        };
        to_unit_range(&out)
    }
}

/// Hyperparameters of autoencoder pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeTraining {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f32,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AeTraining {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            dropout: 0.2,
            batch_size: 64,
            val_fraction: 0.1,
            patience: 10,
            seed: 0,
        }
    }
}

/// A trained autoencoder. Parameters live in one store under `encoder.`
/// and `decoder.`.
pub struct AutoencoderPair {
    arch: AeArch,
    varmap: VarMap,
    encoder: AeEncoder,
    decoder: AeDecoder,
    training: AeTraining,
    report: FitReport,
}

impl AutoencoderPair {
    pub fn new(arch: AeArch, training: AeTraining) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let encoder = AeEncoder {
            net: build_encoder(arch, vb.pp("encoder"))?,
            arch,
            dropout: training.dropout,
        };
        let decoder = AeDecoder {
            net: build_decoder(arch, vb.pp("decoder"))?,
            dropout: training.dropout,
        };
        nn::reseed(&varmap, training.seed)?;
        Ok(Self {
            arch,
            varmap,
            encoder,
            decoder,
            training,
            report: FitReport::default(),
        })
    }

    pub fn arch(&self) -> AeArch {
        self.arch
    }

    pub fn latent_width(&self) -> usize {
        self.arch.latent_width()
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    /// Mean per-feature MSE on the held-out part of the training data.
    pub fn heldout_mse(&self) -> Option<f64> {
        self.report.best_epoch.map(|e| self.report.val_loss[e])
    }

    fn reconstruct_tensor(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let z = self.encoder.forward(x, mode)?;
        self.decoder.forward(&z, mode)
    }

    /// `decoder(encoder(x))` for flat samples, in eval mode.
    pub fn reconstruct(&self, samples: &SampleSet) -> Result<SampleSet> {
        if samples.dim() != self.arch.sample_len() {
            return Err(usage(format!(
                "autoencoder expects {} features, got {}",
                self.arch.sample_len(),
                samples.dim()
            )));
        }
        let mut out = Vec::with_capacity(samples.as_slice().len());
        for chunk in samples.as_slice().chunks(256 * samples.dim()) {
            let x = Tensor::from_slice(chunk, (chunk.len() / samples.dim(), samples.dim()), &DEVICE)?;
            out.extend(nn::flat_f32(&self.reconstruct_tensor(&x, &mut Mode::Eval)?)?);
        }
        Ok(SampleSet::new(out, samples.dim())?)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new("autoencoder", config_hash);
        c.set_meta("arch_id", self.arch.id());
        c.set_meta("training_meta", serde_json::to_string(&self.training).expect("serializes"));
        c.set_meta("report", serde_json::to_string(&(&self.report.val_loss, self.report.best_epoch)).expect("serializes"));
        c.insert_vars("", &self.varmap)?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        let arch = match c.meta("arch_id") {
            Some("ae_mnist") => AeArch::Mnist,
            Some("ae_cifar10") => AeArch::Cifar10,
            Some("ae_checkin") => AeArch::Checkin,
            _ => return Err(Error::format(path, "not an autoencoder checkpoint")),
        };
        let training: AeTraining = serde_json::from_str(c.meta("training_meta").unwrap_or(""))
            .map_err(|e| Error::format(path, format!("training_meta: {e}")))?;
        let mut ae = Self::new(arch, training)?;
        c.restore_vars("", &ae.varmap, path)?;
        if let Ok((val_loss, best_epoch)) = serde_json::from_str(c.meta("report").unwrap_or("")) {
            ae.report.val_loss = val_loss;
            ae.report.best_epoch = best_epoch;
        }
        Ok((ae, c))
    }
}

fn mse_loss(pred: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    (pred - target)?.sqr()?.mean_all()
}

/// Pretrains an autoencoder on shadow samples under per-feature MSE, early
/// stopped on a held-out slice.
pub fn train_autoencoder(shadow_train: &LabeledDataset, arch: AeArch, training: &AeTraining) -> Result<AutoencoderPair> {
    if shadow_train.shape() != arch.sample_shape() {
        return Err(usage(format!(
            "{} expects samples of shape {:?}, got {:?}",
            arch.id(),
            arch.sample_shape(),
            shadow_train.shape()
        )));
    }
    let mut ae = AutoencoderPair::new(arch, *training)?;
    let d = arch.sample_len();
    let x = |rows: &[usize]| nn::gather_rows(shadow_train.features(), d, rows, &[d]);
    let cfg = FitConfig {
        epochs: training.epochs,
        batch_size: training.batch_size,
        lr: training.lr,
        val_fraction: training.val_fraction,
        patience: training.patience,
        seed: training.seed,
    };
    ae.report = nn::fit(
        &ae.varmap,
        shadow_train.len(),
        &cfg,
        |rows, mode| {
            let x = x(rows)?;
            Ok(mse_loss(&ae.reconstruct_tensor(&x, mode)?, &x)?)
        },
        |rows| {
            let x = x(rows)?;
            Ok(nn::scalar(&mse_loss(&ae.reconstruct_tensor(&x, &mut Mode::Eval)?, &x)?)? * rows.len() as f64)
        },
    )?;
    Ok(ae)
}

/// δ-encoder, a linear bridge 64 → latent width, and the transplanted
/// autoencoder decoder.
pub struct SsrModel {
    arch: AeArch,
    varmap: VarMap,
    encoder: DeltaEncoder,
    bridge: Linear,
    decoder: AeDecoder,
    training: AttackTraining,
    report: FitReport,
}

impl SsrModel {
    fn build(arch: AeArch, input_len: usize, training: AttackTraining, decoder_dropout: f32) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let encoder = DeltaEncoder::new(input_len, training.dropout, vb.pp("encoder"))?;
        let bridge = linear(LATENT_WIDTH, arch.latent_width(), vb.pp("bridge"))?;
        let decoder = AeDecoder {
            net: build_decoder(arch, vb.pp("decoder"))?,
            dropout: decoder_dropout,
        };
        nn::reseed(&varmap, training.seed)?;
        Ok(Self {
            arch,
            varmap,
            encoder,
            bridge,
            decoder,
            training,
            report: FitReport::default(),
        })
    }

    /// Builds the attack around a copy of `ae`'s decoder. Encoder and
    /// bridge are freshly initialized.
    pub fn assemble(ae: &AutoencoderPair, input_len: usize, training: &AttackTraining) -> Result<Self> {
        let m = Self::build(ae.arch, input_len, *training, ae.training.dropout)?;
        nn::copy_prefixed(&ae.varmap, &m.varmap, "decoder.")?;
        Ok(m)
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    pub fn sample_len(&self) -> usize {
        self.arch.sample_len()
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode) -> candle_core::Result<Tensor> {
        let mu = self.encoder.forward(x, mode)?;
        self.decoder.forward(&self.bridge.forward(&mu)?, mode)
    }

    /// Reconstructions for a batch of flat deltas.
    pub fn reconstruct_batch(&self, deltas: &[f32]) -> Result<SampleSet> {
        let w = self.encoder.input_len();
        if deltas.is_empty() || deltas.len() % w != 0 {
            return Err(usage("delta batch is not a whole number of rows"));
        }
        let mut out = Vec::new();
        for chunk in deltas.chunks(256 * w) {
            let x = Tensor::from_slice(chunk, (chunk.len() / w, w), &DEVICE)?;
            out.extend(nn::flat_f32(&self.forward(&x, &mut Mode::Eval)?)?);
        }
        Ok(SampleSet::new(out, self.sample_len())?)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new("attack", config_hash);
        c.set_meta("arch_id", "assr");
        c.set_meta("ae_arch", self.arch.id());
        c.set_meta("input_len", self.encoder.input_len().to_string());
        c.set_meta("decoder_dropout", self.decoder.dropout.to_string());
        c.set_meta("training_meta", serde_json::to_string(&self.training).expect("serializes"));
        c.insert_vars("", &self.varmap)?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        if c.meta("arch_id") != Some("assr") {
            return Err(Error::format(path, "not a single-sample reconstruction checkpoint"));
        }
        let arch = match c.meta("ae_arch") {
            Some("ae_mnist") => AeArch::Mnist,
            Some("ae_cifar10") => AeArch::Cifar10,
            Some("ae_checkin") => AeArch::Checkin,
            _ => return Err(Error::format(path, "unknown ae_arch")),
        };
        let input_len = c
            .meta("input_len")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "missing input_len"))?;
        let dropout = c.meta("decoder_dropout").and_then(|s| s.parse().ok()).unwrap_or(0.0);
        let training: AttackTraining = serde_json::from_str(c.meta("training_meta").unwrap_or(""))
            .map_err(|e| Error::format(path, format!("training_meta: {e}")))?;
        let m = Self::build(arch, input_len, training, dropout)?;
        c.restore_vars("", &m.varmap, path)?;
        Ok((m, c))
    }
}

/// Fine-tunes an assembled model end to end on (δ, sample) pairs.
pub fn train_ssr(model: &mut SsrModel, corpus: &AttackCorpus) -> Result<()> {
    if corpus.cardinalities().iter().any(|&k| k != 1) {
        return Err(usage("single-sample reconstruction needs cardinality 1"));
    }
    let sets = corpus.sample_sets()?;
    if sets.first().is_some_and(|s| s.dim() != model.sample_len()) {
        return Err(usage("corpus samples do not match the decoder output"));
    }
    model.encoder.check_width(corpus.delta_len())?;
    let d = model.sample_len();
    let xs = |rows: &[usize]| -> Result<(Tensor, Tensor)> {
        let delta = nn::gather_rows(corpus.deltas(), corpus.delta_len(), rows, &[corpus.delta_len()])?;
        let mut t = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            t.extend_from_slice(sets[r].row(0));
        }
        Ok((delta, Tensor::from_vec(t, (rows.len(), d), &DEVICE)?))
    };
    let cfg = model.training.fit_config();
    let report = nn::fit(
        &model.varmap,
        corpus.len(),
        &cfg,
        |rows, mode| {
            let (x, y) = xs(rows)?;
            Ok(mse_loss(&model.forward(&x, mode)?, &y)?)
        },
        |rows| {
            let (x, y) = xs(rows)?;
            Ok(nn::scalar(&mse_loss(&model.forward(&x, &mut Mode::Eval)?, &y)?)? * rows.len() as f64)
        },
    )?;
    model.report = report;
    Ok(())
}

/// Assembles the attack from `ae` and fine-tunes it on `corpus`.
pub fn assemble_and_train_ssr(ae: &AutoencoderPair, corpus: &AttackCorpus, training: &AttackTraining) -> Result<SsrModel> {
    let mut m = SsrModel::assemble(ae, corpus.delta_len(), training)?;
    train_ssr(&mut m, corpus)?;
    Ok(m)
}

/// The reconstructed updating sample behind `delta`, in [0, 1].
pub fn reconstruct_single(model: &SsrModel, delta: &DeltaVector) -> Result<Vec<f32>> {
    model.encoder.check_width(delta.len())?;
    Ok(model.reconstruct_batch(delta.values())?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoders_emit_sample_shapes() {
        for arch in [AeArch::Mnist, AeArch::Cifar10, AeArch::Checkin] {
            let ae = AutoencoderPair::new(arch, AeTraining::default()).unwrap();
            let x = SampleSet::new(vec![0.3; 4 * arch.sample_len()], arch.sample_len()).unwrap();
            let y = ae.reconstruct(&x).unwrap();
            assert_eq!((y.len(), y.dim()), (4, arch.sample_len()));
            assert!(y.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn assembly_copies_the_decoder_bit_for_bit() {
        let ae = AutoencoderPair::new(AeArch::Checkin, AeTraining { seed: 11, ..Default::default() }).unwrap();
        let m = SsrModel::assemble(&ae, 800, &AttackTraining { seed: 12, ..Default::default() }).unwrap();
        assert!(nn::prefixed_equal(ae.varmap(), m.varmap(), "decoder.").unwrap());
        let other = SsrModel::build(AeArch::Checkin, 800, AttackTraining { seed: 12, ..Default::default() }, 0.2).unwrap();
        assert!(!nn::prefixed_equal(ae.varmap(), other.varmap(), "decoder.").unwrap());
    }
}
