//! Multi-sample reconstruction: a conditional GAN trained with the
//! best-match loss, candidate generation, and K-means extraction of the
//! final set.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{
    batch_norm, conv2d, conv_transpose2d, linear, BatchNorm, Conv2d, Conv2dConfig, ConvTranspose2d,
    ConvTranspose2dConfig, Linear, Module, ModuleT, Optimizer, VarBuilder, VarMap,
};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use updateleak_core::cluster::{cluster_reconstruct, detect_cardinality, CardinalityChoice, KMeansParams, ReconstructionSet};
use updateleak_core::loss::SCORE_EPS;
use updateleak_core::posterior::DeltaVector;
use updateleak_core::rng;
use updateleak_core::samples::squared_distance;
use updateleak_core::SampleSet;

use crate::attack::{DeltaEncoder, LATENT_WIDTH};
use crate::container::Container;
use crate::corpus::AttackCorpus;
use crate::data::DatasetName;
use crate::error::usage;
use crate::nn::{self, Mode, DEVICE};
use crate::ssr::to_unit_range;
use crate::{Error, Result};

const GAN_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;

/// CBM-GAN hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanSettings {
    pub noise_dim: usize,
    /// Multiplier on every hidden width of generator and discriminator.
    pub width_scale: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Corpus rows per optimizer step. Batch normalization needs several
    /// distinct latent codes in a batch or the conditioning is normalized
    /// away.
    pub rows_per_step: usize,
    pub adversarial_weight: f64,
    pub dropout: f32,
    pub seed: u64,
}

impl GanSettings {
    pub fn for_dataset(d: DatasetName) -> Self {
        Self {
            noise_dim: if d.is_image() { 100 } else { 32 },
            width_scale: 1.0,
            epochs: 20,
            lr: 1e-3,
            rows_per_step: 8,
            adversarial_weight: 1.0,
            dropout: 0.5,
            seed: 0,
        }
    }
}

fn scaled(w: usize, s: f64) -> usize {
    ((w as f64 * s).round() as usize).max(1)
}

fn leaky(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(x, GAN_SLOPE)
}

enum Stack {
    Dense {
        fcs: Vec<Linear>,
        bns: Vec<BatchNorm>,
    },
    UpConv {
        in_ch: usize,
        layers: Vec<ConvTranspose2d>,
        bns: Vec<BatchNorm>,
    },
    DownConv {
        shape: [usize; 3],
        layers: Vec<Conv2d>,
        bns: Vec<BatchNorm>,
    },
}

impl Stack {
    fn dense(widths: &[usize], vb: &VarBuilder) -> candle_core::Result<Self> {
        let mut fcs = Vec::new();
        let mut bns = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            fcs.push(linear(w[0], w[1], vb.pp(format!("fc{}", i + 1)))?);
            if i + 2 < widths.len() {
                bns.push(batch_norm(w[1], BN_EPS, vb.pp(format!("bn{}", i + 1)))?);
            }
        }
        Ok(Stack::Dense { fcs, bns })
    }

    /// Every layer but the last gets batch norm and LeakyReLU.
    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        match self {
            Stack::Dense { fcs, bns } => {
                let mut x = x.clone();
                for (fc, bn) in fcs.iter().zip(bns) {
                    x = leaky(&bn.forward_t(&fc.forward(&x)?, train)?)?;
                }
                fcs.last().expect("non-empty").forward(&x)
            }
            Stack::UpConv { in_ch, layers, bns } => {
                let mut x = x.reshape((x.dim(0)?, *in_ch, 1, 1))?;
                for (l, bn) in layers.iter().zip(bns) {
                    x = leaky(&bn.forward_t(&l.forward(&x)?, train)?)?;
                }
                layers.last().expect("non-empty").forward(&x)?.flatten_from(1)
            }
            Stack::DownConv { shape, layers, bns } => {
                let mut x = x.reshape((x.dim(0)?, shape[0], shape[1], shape[2]))?;
                for (l, bn) in layers.iter().zip(bns) {
                    x = leaky(&bn.forward_t(&l.forward(&x)?, train)?)?;
                }
                layers.last().expect("non-empty").forward(&x)?.flatten_from(1)
            }
        }
    }
}

fn build_generator(d: DatasetName, input: usize, s: f64, vb: VarBuilder) -> candle_core::Result<Stack> {
    match d {
        DatasetName::Mnist => Stack::dense(&[input, scaled(2048, s), scaled(2048, s), scaled(2048, s), 784], &vb),
        DatasetName::Checkin => Stack::dense(&[input, scaled(512, s), scaled(512, s), scaled(256, s), 168], &vb),
        // 1 → 2 → 4 → 8 → 16 → 32.
        DatasetName::Cifar10 => {
            let chans = [input, scaled(512, s), scaled(256, s), scaled(128, s), scaled(64, s), 3];
            let mut layers = Vec::new();
            let mut bns = Vec::new();
            for (i, c) in chans.windows(2).enumerate() {
                let (k, cfg) = if i == 0 {
                    (2, ConvTranspose2dConfig::default())
                } else {
                    (4, ConvTranspose2dConfig { padding: 1, stride: 2, ..Default::default() })
                };
                layers.push(conv_transpose2d(c[0], c[1], k, cfg, vb.pp(format!("convt{}", i + 1)))?);
                if i + 2 < chans.len() {
                    bns.push(batch_norm(c[1], BN_EPS, vb.pp(format!("bn{}", i + 1)))?);
                }
            }
            Ok(Stack::UpConv { in_ch: input, layers, bns })
        }
    }
}

fn build_discriminator(d: DatasetName, s: f64, vb: VarBuilder) -> candle_core::Result<Stack> {
    match d {
        DatasetName::Mnist => Stack::dense(&[784, scaled(1024, s), scaled(512, s), scaled(256, s), 1], &vb),
        DatasetName::Checkin => Stack::dense(&[168, scaled(512, s), scaled(256, s), scaled(128, s), 1], &vb),
        // 32 → 16 → 8 → 4 → 2 → 1.
        DatasetName::Cifar10 => {
            let chans = [3, scaled(64, s), scaled(128, s), scaled(256, s), scaled(512, s), 1];
            let mut layers = Vec::new();
            let mut bns = Vec::new();
            for (i, c) in chans.windows(2).enumerate() {
                let (k, cfg) = if i + 2 == chans.len() {
                    (2, Conv2dConfig::default())
                } else {
                    (4, Conv2dConfig { padding: 1, stride: 2, ..Default::default() })
                };
                layers.push(conv2d(c[0], c[1], k, cfg, vb.pp(format!("conv{}", i + 1)))?);
                if i + 2 < chans.len() {
                    bns.push(batch_norm(c[1], BN_EPS, vb.pp(format!("bn{}", i + 1)))?);
                }
            }
            Ok(Stack::DownConv { shape: [3, 32, 32], layers, bns })
        }
    }
}

/// Per-epoch training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    /// Best-match reconstruction term per truth sample and feature.
    pub reconstruction: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// δ-encoder, conditional generator and discriminator. Encoder and
/// generator share one parameter store, the discriminator has its own.
pub struct CbmGan {
    dataset: DatasetName,
    settings: GanSettings,
    input_len: usize,
    gen_vars: VarMap,
    disc_vars: VarMap,
    encoder: DeltaEncoder,
    generator: Stack,
    discriminator: Stack,
    history: GanHistory,
}

impl CbmGan {
    pub fn new(dataset: DatasetName, input_len: usize, settings: GanSettings) -> Result<Self> {
        if settings.noise_dim == 0 {
            return Err(usage("noise_dim must be positive"));
        }
        let gen_vars = VarMap::new();
        let disc_vars = VarMap::new();
        let gvb = VarBuilder::from_varmap(&gen_vars, DType::F32, &DEVICE);
        let dvb = VarBuilder::from_varmap(&disc_vars, DType::F32, &DEVICE);
        let encoder = DeltaEncoder::new(input_len, settings.dropout, gvb.pp("encoder"))?;
        let generator = build_generator(dataset, LATENT_WIDTH + settings.noise_dim, settings.width_scale, gvb.pp("generator"))?;
        let discriminator = build_discriminator(dataset, settings.width_scale, dvb.pp("discriminator"))?;
        nn::reseed(&gen_vars, settings.seed)?;
        nn::reseed(&disc_vars, settings.seed)?;
        Ok(Self {
            dataset,
            settings,
            input_len,
            gen_vars,
            disc_vars,
            encoder,
            generator,
            discriminator,
            history: GanHistory::default(),
        })
    }

    pub fn dataset(&self) -> DatasetName {
        self.dataset
    }

    pub fn settings(&self) -> &GanSettings {
        &self.settings
    }

    pub fn history(&self) -> &GanHistory {
        &self.history
    }

    pub fn generator_vars(&self) -> &VarMap {
        &self.gen_vars
    }

    pub fn discriminator_vars(&self) -> &VarMap {
        &self.disc_vars
    }

    fn generate(&self, mu: &Tensor, z: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        to_unit_range(&self.generator.forward(&Tensor::cat(&[mu, z], 1)?, train)?)
    }

    /// Realness scores in (0, 1) for flat samples.
    pub fn discriminate(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        candle_nn::ops::sigmoid(&self.discriminator.forward(x, train)?)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut c = Container::new("attack", config_hash);
        c.set_meta("arch_id", "amsr");
        c.set_meta("dataset", self.dataset.as_str());
        c.set_meta("input_len", self.input_len.to_string());
        c.set_meta("training_meta", serde_json::to_string(&self.settings).expect("serializes"));
        c.set_meta("history", serde_json::to_string(&self.history).expect("serializes"));
        c.insert_vars("", &self.gen_vars)?;
        c.insert_vars("", &self.disc_vars)?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        if c.meta("arch_id") != Some("amsr") {
            return Err(Error::format(path, "not a multi-sample reconstruction checkpoint"));
        }
        let dataset: DatasetName = c.meta("dataset").unwrap_or("").parse()?;
        let input_len = c
            .meta("input_len")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "missing input_len"))?;
        let settings: GanSettings = serde_json::from_str(c.meta("training_meta").unwrap_or(""))
            .map_err(|e| Error::format(path, format!("training_meta: {e}")))?;
        let mut m = Self::new(dataset, input_len, settings)?;
        c.restore_vars("", &m.gen_vars, path)?;
        c.restore_vars("", &m.disc_vars, path)?;
        if let Ok(h) = serde_json::from_str(c.meta("history").unwrap_or("")) {
            m.history = h;
        }
        Ok((m, c))
    }
}

fn log_clamped(s: &Tensor) -> candle_core::Result<Tensor> {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?.log()
}

/// For every truth sample of every row, the index (into the flat generated
/// batch) of its closest generated sample of the same row.
fn match_indices(generated: &[f32], dim: usize, row_spans: &[(usize, usize)], truth: &[&SampleSet]) -> Vec<u32> {
    let mut out = Vec::new();
    for (&(start, len), set) in row_spans.iter().zip(truth) {
        for t in set.rows() {
            let mut best = (start, f32::INFINITY);
            for j in start..start + len {
                let d = squared_distance(&generated[j * dim..(j + 1) * dim], t);
                if d < best.1 {
                    best = (j, d);
                }
            }
            out.push(best.0 as u32);
        }
    }
    out
}

/// Trains the CBM-GAN on a corpus whose targets are the updating sets'
/// samples. Each step takes `rows_per_step` corpus rows and, per row,
/// encodes δ, draws one noise vector per set member, generates, applies the
/// best-match generator loss to encoder and generator, then updates the
/// discriminator on the row's true samples against the generated ones.
pub fn train_cbm_gan(corpus: &AttackCorpus, dataset: DatasetName, settings: &GanSettings) -> Result<CbmGan> {
    let sets = corpus.sample_sets()?;
    if corpus.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Core(updateleak_core::Error::Data("empty updating sets in corpus".into())));
    }
    let dim = dataset.sample_len();
    if sets[0].dim() != dim {
        return Err(usage(format!("corpus samples have {} features, {} has {dim}", sets[0].dim(), dataset.as_str())));
    }
    let mut model = CbmGan::new(dataset, corpus.delta_len(), *settings)?;
    let mut gen_opt = nn::adam(nn::trainable(&model.gen_vars), settings.lr)?;
    let mut disc_opt = nn::adam(nn::trainable(&model.disc_vars), settings.lr)?;
    let mut shuffle = rng::stream(settings.seed, 1);
    let mut drop_rng = rng::stream(settings.seed, 2);
    let mut noise = rng::stream(settings.seed, 3);
    let nz = settings.noise_dim;
    for _ in 0..settings.epochs {
        let (mut rec, mut adv, mut dl, mut n_truth, mut n_steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for rows in nn::batches(corpus.len(), settings.rows_per_step, Some(&mut shuffle)) {
            let truth: Vec<&SampleSet> = rows.iter().map(|&r| &sets[r]).collect();
            let mut spans = Vec::with_capacity(rows.len());
            let mut owner = Vec::new();
            for (i, s) in truth.iter().enumerate() {
                spans.push((owner.len(), s.len()));
                owner.extend(std::iter::repeat_n(i as u32, s.len()));
            }
            let n = owner.len();
            let deltas = nn::gather_rows(corpus.deltas(), corpus.delta_len(), &rows, &[corpus.delta_len()])?;
            let mu = model.encoder.forward(&deltas, &mut Mode::Train(&mut drop_rng))?;
            let mu = mu.index_select(&Tensor::new(owner.as_slice(), &DEVICE)?, 0)?;
            let z: Vec<f32> = (0..n * nz).map(|_| noise.sample(StandardNormal)).collect();
            let z = Tensor::from_vec(z, (n, nz), &DEVICE)?;
            let fake = model.generate(&mu, &z, true)?;

            let idx = match_indices(&nn::flat_f32(&fake)?, dim, &spans, &truth);
            let real: Vec<f32> = truth.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
            let real = Tensor::from_vec(real, (idx.len(), dim), &DEVICE)?;
            let matched = fake.index_select(&Tensor::new(idx.as_slice(), &DEVICE)?, 0)?;
            let recon = ((matched - &real)?.sqr()?.sum_all()? / rows.len() as f64)?;
            let adversarial = log_clamped(&model.discriminate(&fake, true)?)?.mean_all()?.neg()?;
            let g_loss = (&recon + (&adversarial * settings.adversarial_weight)?)?;
            gen_opt.backward_step(&g_loss)?;

            let real_term = log_clamped(&model.discriminate(&real, true)?)?.mean_all()?;
            let fake_scores = model.discriminate(&fake.detach(), true)?;
            let fake_term = log_clamped(&fake_scores.affine(-1.0, 1.0)?)?.mean_all()?;
            let d_loss = (real_term + fake_term)?.neg()?;
            disc_opt.backward_step(&d_loss)?;

            rec += nn::scalar(&recon)? * rows.len() as f64;
            n_truth += idx.len();
            adv += nn::scalar(&adversarial)?;
            dl += nn::scalar(&d_loss)?;
            n_steps += 1;
        }
        model.history.reconstruction.push(rec / (n_truth * dim) as f64);
        model.history.adversarial.push(adv / n_steps as f64);
        model.history.discriminator.push(dl / n_steps as f64);
    }
    Ok(model)
}

/// `n_gen` generated samples for one δ. Candidate `j` uses the noise
/// vector drawn from stream `j` of `seed`, so a smaller `n_gen` yields a
/// prefix of a larger one.
pub fn generate_candidates(model: &CbmGan, delta: &DeltaVector, n_gen: usize, seed: u64) -> Result<SampleSet> {
    if n_gen == 0 {
        return Err(usage("n_gen must be positive"));
    }
    model.encoder.check_width(delta.len())?;
    let x = Tensor::from_slice(delta.values(), (1, delta.len()), &DEVICE)?;
    let mu = model.encoder.forward(&x, &mut Mode::Eval)?;
    let nz = model.settings.noise_dim;
    let dim = model.dataset.sample_len();
    let mut out = Vec::with_capacity(n_gen * dim);
    for start in (0..n_gen).step_by(512) {
        let end = (start + 512).min(n_gen);
        let z: Vec<f32> = (start..end)
            .flat_map(|j| {
                let mut r = rng::stream(seed, j as u64);
                (0..nz).map(move |_| r.sample::<f32, _>(StandardNormal))
            })
            .collect();
        let z = Tensor::from_vec(z, (end - start, nz), &DEVICE)?;
        let mu = mu.broadcast_as((end - start, LATENT_WIDTH))?.contiguous()?;
        out.extend(nn::flat_f32(&model.generate(&mu, &z, false)?)?);
    }
    Ok(SampleSet::new(out, dim)?)
}

/// Clustering settings for turning candidates into a final set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractSettings {
    pub n_gen: usize,
    pub kmeans_restarts: usize,
    pub silhouette_points: usize,
    pub seed: u64,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            n_gen: 20_000,
            kmeans_restarts: 10,
            silhouette_points: 2_000,
            seed: 0,
        }
    }
}

impl ExtractSettings {
    fn kmeans(&self, k: usize) -> KMeansParams {
        KMeansParams {
            k,
            restarts: self.kmeans_restarts,
            max_iter: 100,
            seed: self.seed,
        }
    }
}

/// Full attack on one δ with a known cardinality `k`.
pub fn reconstruct_multi(model: &CbmGan, delta: &DeltaVector, k: usize, s: &ExtractSettings) -> Result<(SampleSet, ReconstructionSet)> {
    let candidates = generate_candidates(model, delta, s.n_gen, s.seed)?;
    let rec = cluster_reconstruct(&candidates, &s.kmeans(k))?;
    Ok((candidates, rec))
}

/// Picks the cardinality among `candidate_ks` by silhouette, then extracts
/// that many samples.
pub fn reconstruct_unknown_cardinality(
    model: &CbmGan,
    delta: &DeltaVector,
    candidate_ks: &[usize],
    s: &ExtractSettings,
) -> Result<(CardinalityChoice, ReconstructionSet)> {
    let candidates = generate_candidates(model, delta, s.n_gen, s.seed)?;
    let choice = detect_cardinality(&candidates, candidate_ks, s.kmeans_restarts, s.silhouette_points, s.seed)?;
    let rec = cluster_reconstruct(&candidates, &s.kmeans(choice.k))?;
    Ok((choice, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use updateleak_core::posterior::ProbeFingerprint;

    #[test]
    fn generator_and_discriminator_shapes() {
        for d in [DatasetName::Mnist, DatasetName::Cifar10, DatasetName::Checkin] {
            let s = GanSettings { width_scale: 0.125, ..GanSettings::for_dataset(d) };
            let m = CbmGan::new(d, 30, s).unwrap();
            let delta = DeltaVector::new(vec![0.01; 30], ProbeFingerprint(0));
            let c = generate_candidates(&m, &delta, 3, 1).unwrap();
            assert_eq!((c.len(), c.dim()), (3, d.sample_len()));
            assert!(c.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            let x = Tensor::from_slice(c.as_slice(), (3, d.sample_len()), &DEVICE).unwrap();
            let s = nn::flat_f32(&m.discriminate(&x, false).unwrap()).unwrap();
            assert_eq!(s.len(), 3);
            assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn candidates_nest_across_n_gen() {
        let d = DatasetName::Checkin;
        let m = CbmGan::new(d, 8, GanSettings::for_dataset(d)).unwrap();
        let delta = DeltaVector::new(vec![0.1; 8], ProbeFingerprint(0));
        let big = generate_candidates(&m, &delta, 600, 5).unwrap();
        let small = generate_candidates(&m, &delta, 7, 5).unwrap();
        assert_eq!(small.as_slice(), &big.as_slice()[..7 * 168]);
        let other = generate_candidates(&m, &delta, 7, 6).unwrap();
        assert_ne!(small, other);
        assert!(generate_candidates(&m, &delta, 0, 5).is_err());
    }

    #[test]
    fn match_indices_stay_within_rows() {
        let generated = [0.0, 10.0, 1.0, 11.0];
        let a = SampleSet::new(vec![0.9], 1).unwrap();
        let b = SampleSet::new(vec![0.1, 10.4], 1).unwrap();
        let idx = match_indices(&generated, 1, &[(0, 2), (2, 2)], &[&a, &b]);
        assert_eq!(idx, vec![0, 2, 3]);
    }
}
