//! Evaluation reports, per-attack evaluation against the baselines, and
//! figure rendering.
//!
//! MSE is always the per-feature mean on the [0, 1] feature range.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use updateleak_core::baseline;
use updateleak_core::cluster::{cluster_reconstruct, detect_cardinality, KMeansParams, ReconstructionSet};
use updateleak_core::dataset::LabeledDataset;
use updateleak_core::metrics::{argmax, matched_set_mse, mse, one_to_one_oracle, summarize_labels};
use updateleak_core::posterior::DeltaVector;
use updateleak_core::SampleSet;

use crate::attack::LabelAttack;
use crate::corpus::{AttackCorpus, Projection};
use crate::error::usage;
use crate::msr::{generate_candidates, CbmGan, ExtractSettings};
use crate::ssr::{AutoencoderPair, SsrModel};
use crate::{Error, Result};

pub const MSE_CONVENTION: &str = "per-feature mean squared error on [0, 1] features";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub original: Vec<f32>,
    pub reconstruction: Vec<f32>,
}

/// Originals next to their reconstructions, for the sample-grid figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub shape: Vec<usize>,
    pub pairs: Vec<SamplePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub attack: String,
    pub dataset: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub mse_convention: String,
    pub metrics: BTreeMap<String, Metric>,
    /// Keyed `<baseline>.<metric>`.
    pub baselines: BTreeMap<String, Metric>,
    pub instances: Vec<BTreeMap<String, f64>>,
    pub notes: Vec<String>,
    pub grid: Option<SampleGrid>,
}

impl EvaluationReport {
    pub fn new(attack: &str, dataset: &str, config_hash: &str) -> Self {
        Self {
            attack: attack.into(),
            dataset: dataset.into(),
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            mse_convention: MSE_CONVENTION.into(),
            metrics: BTreeMap::new(),
            baselines: BTreeMap::new(),
            instances: Vec::new(),
            notes: Vec::new(),
            grid: None,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64, direction: Direction) {
        self.metrics.insert(name.into(), Metric { value, direction });
    }

    pub fn baseline(&mut self, name: &str, value: f64, direction: Direction) {
        self.baselines.insert(name.into(), Metric { value, direction });
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).or_else(|| self.baselines.get(name)).map(|m| m.value)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        write(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// One line per metric and baseline: `kind,name,value,direction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,value,direction\n");
        for (kind, map) in [("metric", &self.metrics), ("baseline", &self.baselines)] {
            for (name, m) in map {
                let dir = match m.direction {
                    Direction::HigherIsBetter => "higher_is_better",
                    Direction::LowerIsBetter => "lower_is_better",
                };
                let _ = writeln!(out, "{kind},{name},{},{dir}", m.value);
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write(path, self.to_csv().as_bytes())
    }

    /// Human-readable table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "attack {} on {} (config {})", self.attack, self.dataset, short(&self.config_hash));
        for (kind, map) in [("metric", &self.metrics), ("baseline", &self.baselines)] {
            for (name, m) in map {
                let arrow = match m.direction {
                    Direction::HigherIsBetter => "↑",
                    Direction::LowerIsBetter => "↓",
                };
                let _ = writeln!(out, "  {kind:<8} {name:<40} {:>12.6} {arrow}", m.value);
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "  note: {n}");
        }
        out
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// What the evaluation of any attack needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    /// The adversary's data, used by the baselines.
    pub shadow: &'a LabeledDataset,
    /// The target updating pool the target corpus indexes into.
    pub target_pool: &'a LabeledDataset,
    pub draws: usize,
    pub seed: u64,
    pub max_instances: Option<usize>,
}

impl EvalContext<'_> {
    fn limit(&self, corpus: &AttackCorpus) -> AttackCorpus {
        match self.max_instances {
            Some(n) if n < corpus.len() => corpus.head(n),
            _ => corpus.clone(),
        }
    }
}

const GRID_PAIRS: usize = 10;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn instance(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Label inference: accuracy against the uniform guess.
pub fn evaluate_li(report: &mut EvaluationReport, model: &LabelAttack, target: &AttackCorpus, ctx: &EvalContext) -> Result<()> {
    let target = ctx.limit(target).project_targets(Projection::Label, ctx.target_pool)?;
    let labels = target.labels()?;
    let preds = model.predict_batch(target.deltas())?;
    let mut hits = 0usize;
    for (i, (p, &l)) in preds.iter().zip(labels).enumerate() {
        let guess = argmax(p);
        hits += usize::from(guess as u32 == l);
        report.instances.push(instance(&[
            ("row", i as f64),
            ("label", f64::from(l)),
            ("predicted", guess as f64),
            ("p_label", p[l as usize]),
        ]));
    }
    report.metric("accuracy", hits as f64 / labels.len() as f64, Direction::HigherIsBetter);
    let base = baseline::random_label_accuracy(labels, model.num_classes(), ctx.draws, ctx.seed)?;
    report.baseline("random_label.accuracy", base, Direction::HigherIsBetter);
    Ok(())
}

/// Label-distribution estimation: KL and top-label accuracy against a
/// random same-size draw from the shadow data. Rows with δ = 0 are flagged
/// as out of distribution.
pub fn evaluate_lde(report: &mut EvaluationReport, model: &LabelAttack, target: &AttackCorpus, ctx: &EvalContext) -> Result<()> {
    let card = target
        .cardinality()
        .ok_or_else(|| usage("distribution evaluation needs a single cardinality"))?;
    let target = ctx.limit(target).project_targets(Projection::Distribution, ctx.target_pool)?;
    let dists = target.distributions()?;
    let preds = model.predict_batch(target.deltas())?;
    let s = summarize_labels(preds.iter().zip(dists).map(|(p, q)| (p.as_slice(), q.as_slice())))?;
    let mut ood = 0usize;
    for (i, (p, q)) in preds.iter().zip(dists).enumerate() {
        let zero = target.delta(i).iter().all(|&v| v == 0.0);
        ood += usize::from(zero);
        let m = updateleak_core::metrics::label_metrics(p, q)?;
        report.instances.push(instance(&[
            ("row", i as f64),
            ("kl", m.kl),
            ("top_label_hit", f64::from(u8::from(m.top_label_hit))),
            ("ood", f64::from(u8::from(zero))),
        ]));
    }
    if ood > 0 {
        report.notes.push(format!("{ood} target rows have δ = 0 (out of distribution)"));
    }
    report.metric("kl", s.mean_kl, Direction::LowerIsBetter);
    report.metric("top_label_accuracy", s.top_label_accuracy, Direction::HigherIsBetter);
    report.metric("accuracy", s.accuracy, Direction::HigherIsBetter);
    let b = baseline::random_distribution_metrics(ctx.shadow, dists, card, ctx.draws, ctx.seed)?;
    report.baseline("random_distribution.kl", b.mean_kl, Direction::LowerIsBetter);
    report.baseline("random_distribution.top_label_accuracy", b.top_label_accuracy, Direction::HigherIsBetter);
    report.baseline("random_distribution.accuracy", b.accuracy, Direction::HigherIsBetter);
    Ok(())
}

/// Single-sample reconstruction against Random, Label-random (labels from
/// the label-inference attack) and the autoencoder oracle.
pub fn evaluate_ssr(
    report: &mut EvaluationReport,
    model: &SsrModel,
    ae: &AutoencoderPair,
    li: &LabelAttack,
    target: &AttackCorpus,
    ctx: &EvalContext,
) -> Result<()> {
    let target = ctx.limit(target);
    let labels: Vec<u32> = target.update_sets()?.iter().map(|s| s.labels[0]).collect();
    let target = target.project_targets(Projection::Samples, ctx.target_pool)?;
    let truth = SampleSet::from_rows(&target.sample_sets()?.iter().map(|s| s.row(0)).collect::<Vec<_>>())?;
    let rec = model.reconstruct_batch(target.deltas())?;
    let oracle = ae.reconstruct(&truth)?;
    let inferred: Vec<u32> = li.predict_batch(target.deltas())?.iter().map(|p| argmax(p) as u32).collect();
    let mut errs = Vec::with_capacity(truth.len());
    let mut oracle_errs = Vec::with_capacity(truth.len());
    for i in 0..truth.len() {
        let e = mse(rec.row(i), truth.row(i))?;
        let o = mse(oracle.row(i), truth.row(i))?;
        errs.push(e);
        oracle_errs.push(o);
        report.instances.push(instance(&[
            ("row", i as f64),
            ("label", f64::from(labels[i])),
            ("inferred_label", f64::from(inferred[i])),
            ("mse", e),
            ("ae_oracle_mse", o),
        ]));
    }
    report.metric("mse", mean(&errs), Direction::LowerIsBetter);
    let li_acc = inferred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
    report.metric("label_inference_accuracy", li_acc, Direction::HigherIsBetter);
    let r = baseline::random_sample_mse(ctx.shadow, &truth, ctx.draws, ctx.seed)?;
    report.baseline("random_sample.mse", mean(&r), Direction::LowerIsBetter);
    let lr = baseline::label_random_sample_mse(ctx.shadow, &inferred, &truth, ctx.draws, ctx.seed)?;
    report.baseline("label_random_sample.mse", mean(&lr), Direction::LowerIsBetter);
    report.baseline("ae_oracle.mse", mean(&oracle_errs), Direction::LowerIsBetter);
    report.notes.push("ae_oracle reconstructs the true sample with the pretrained autoencoder; it is not an attack".into());
    report.grid = Some(SampleGrid {
        shape: ctx.target_pool.shape().to_vec(),
        pairs: (0..truth.len().min(GRID_PAIRS))
            .map(|i| SamplePair {
                original: truth.row(i).to_vec(),
                reconstruction: rec.row(i).to_vec(),
            })
            .collect(),
    });
    Ok(())
}

/// Outcome of the multi-sample attack on one target row.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrInstance {
    pub cardinality: usize,
    pub matched_mse: f64,
    pub one_to_one_mse: f64,
    pub shadow_clustering_mse: f64,
    pub label_average_mse: f64,
    /// Detected cardinality and the silhouette per candidate k.
    pub detected: Option<(usize, Vec<(usize, f64)>)>,
    pub reconstruction: ReconstructionSet,
}

/// Runs the multi-sample attack on one δ with known cardinality and scores
/// it, along with both baselines. `shadow_clusters` caches the
/// Shadow-clustering reconstruction per k.
pub fn msr_instance(
    model: &CbmGan,
    delta: &DeltaVector,
    truth: &SampleSet,
    truth_labels: &[u32],
    extract: &ExtractSettings,
    candidate_ks: &[usize],
    shadow: &LabeledDataset,
    shadow_clusters: &mut HashMap<usize, ReconstructionSet>,
) -> Result<MsrInstance> {
    let k = truth.len();
    let candidates = generate_candidates(model, delta, extract.n_gen, extract.seed)?;
    let params = |k| KMeansParams {
        k,
        restarts: extract.kmeans_restarts,
        max_iter: 100,
        seed: extract.seed,
    };
    let rec = cluster_reconstruct(&candidates, &params(k))?;
    let matched = matched_set_mse(&rec.finals, truth)?.mean;
    let one = one_to_one_oracle(&candidates, truth)?;
    if !shadow_clusters.contains_key(&k) {
        shadow_clusters.insert(k, baseline::shadow_clustering(shadow, &params(k))?);
    }
    let sc = matched_set_mse(&shadow_clusters[&k].finals, truth)?.mean;
    let la = mean(&baseline::label_average_mse(shadow, truth, truth_labels)?);
    let detected = if candidate_ks.is_empty() {
        None
    } else {
        let c = detect_cardinality(&candidates, candidate_ks, extract.kmeans_restarts, extract.silhouette_points, extract.seed)?;
        Some((c.k, c.scores))
    };
    Ok(MsrInstance {
        cardinality: k,
        matched_mse: matched,
        one_to_one_mse: one,
        shadow_clustering_mse: sc,
        label_average_mse: la,
        detected,
        reconstruction: rec,
    })
}

/// Multi-sample reconstruction: Hungarian-matched MSE against
/// Shadow-clustering and Label-average, the one-to-one oracle, and
/// cardinality detection when `candidate_ks` is non-empty.
pub fn evaluate_msr(
    report: &mut EvaluationReport,
    model: &CbmGan,
    target: &AttackCorpus,
    extract: &ExtractSettings,
    candidate_ks: &[usize],
    ctx: &EvalContext,
) -> Result<()> {
    let target = ctx.limit(target);
    let labels: Vec<Vec<u32>> = target.update_sets()?.iter().map(|s| s.labels.clone()).collect();
    let target = target.project_targets(Projection::Samples, ctx.target_pool)?;
    let sets = target.sample_sets()?;
    let mut cache = HashMap::new();
    let (mut m, mut o, mut sc, mut la, mut det) = (vec![], vec![], vec![], vec![], 0usize);
    for (i, truth) in sets.iter().enumerate() {
        let delta = DeltaVector::new(target.delta(i).to_vec(), target.fingerprint());
        let r = msr_instance(model, &delta, truth, &labels[i], extract, candidate_ks, ctx.shadow, &mut cache)?;
        let mut row = instance(&[
            ("row", i as f64),
            ("cardinality", r.cardinality as f64),
            ("matched_mse", r.matched_mse),
            ("one_to_one_mse", r.one_to_one_mse),
            ("shadow_clustering_mse", r.shadow_clustering_mse),
            ("label_average_mse", r.label_average_mse),
        ]);
        if let Some((k, scores)) = &r.detected {
            det += usize::from(*k == r.cardinality);
            row.insert("detected_k".into(), *k as f64);
            for (k, s) in scores {
                row.insert(format!("silhouette_k{k}"), *s);
            }
        }
        report.instances.push(row);
        if i == 0 {
            let matching = matched_set_mse(&r.reconstruction.finals, truth)?;
            report.grid = Some(SampleGrid {
                shape: ctx.target_pool.shape().to_vec(),
                pairs: matching
                    .assignment
                    .pairs
                    .iter()
                    .enumerate()
                    .take(GRID_PAIRS)
                    .map(|(ri, &ti)| SamplePair {
                        original: truth.row(ti).to_vec(),
                        reconstruction: r.reconstruction.finals.row(ri).to_vec(),
                    })
                    .collect(),
            });
        }
        m.push(r.matched_mse);
        o.push(r.one_to_one_mse);
        sc.push(r.shadow_clustering_mse);
        la.push(r.label_average_mse);
    }
    report.metric("matched_mse", mean(&m), Direction::LowerIsBetter);
    report.metric("one_to_one_mse", mean(&o), Direction::LowerIsBetter);
    if !candidate_ks.is_empty() {
        report.metric("cardinality_accuracy", det as f64 / sets.len() as f64, Direction::HigherIsBetter);
    }
    report.baseline("shadow_clustering.matched_mse", mean(&sc), Direction::LowerIsBetter);
    report.baseline("label_average.mse", mean(&la), Direction::LowerIsBetter);
    report.notes.push("one_to_one_mse matches each true sample to its nearest candidate; it is an oracle".into());
    report.notes.push(format!("{} target rows evaluated with {} candidates each", sets.len(), extract.n_gen));
    Ok(())
}

const BAR_HEIGHT: u32 = 200;
const BAR_WIDTH: u32 = 30;
const GAP: u32 = 10;
const ATTACK_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const BASELINE_COLOR: Rgb<u8> = Rgb([150, 150, 150]);

/// Bars for one metric, the attack first and its baselines after, scaled
/// to the largest value.
pub fn bar_chart(values: &[(f64, bool)]) -> RgbImage {
    let w = GAP + values.len() as u32 * (BAR_WIDTH + GAP);
    let mut img = ImageBuffer::from_pixel(w, BAR_HEIGHT + 2 * GAP, Rgb([255, 255, 255]));
    let top = values.iter().map(|v| v.0).fold(f64::MIN_POSITIVE, f64::max);
    for (i, &(v, is_attack)) in values.iter().enumerate() {
        let h = ((v.max(0.0) / top) * f64::from(BAR_HEIGHT)).round() as u32;
        let x0 = GAP + i as u32 * (BAR_WIDTH + GAP);
        let color = if is_attack { ATTACK_COLOR } else { BASELINE_COLOR };
        for x in x0..x0 + BAR_WIDTH {
            for y in (GAP + BAR_HEIGHT - h)..(GAP + BAR_HEIGHT) {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

fn to_pixels(sample: &[f32], shape: &[usize]) -> (u32, u32, Vec<[u8; 3]>) {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match shape {
        [c, h, w] => {
            let plane = h * w;
            let px = (0..plane)
                .map(|p| {
                    if *c == 3 {
                        [q(sample[p]), q(sample[plane + p]), q(sample[2 * plane + p])]
                    } else {
                        [q(sample[p]); 3]
                    }
                })
                .collect();
            (*w as u32, *h as u32, px)
        }
        // Tabular week profiles: one row per day, one column per hour.
        _ => {
            let w = 24.min(sample.len()).max(1);
            let h = sample.len().div_ceil(w);
            let mut px: Vec<[u8; 3]> = sample.iter().map(|&v| [q(v); 3]).collect();
            px.resize(w * h, [0; 3]);
            (w as u32, h as u32, px)
        }
    }
}

/// Two columns: originals on the left, reconstructions on the right.
pub fn sample_grid(grid: &SampleGrid, scale: u32) -> RgbImage {
    let Some(first) = grid.pairs.first() else {
        return ImageBuffer::new(1, 1);
    };
    let (w, h, _) = to_pixels(&first.original, &grid.shape);
    let (cw, ch) = (w * scale, h * scale);
    let mut img = ImageBuffer::from_pixel(2 * cw + 3 * GAP, grid.pairs.len() as u32 * (ch + GAP) + GAP, Rgb([255, 255, 255]));
    for (r, pair) in grid.pairs.iter().enumerate() {
        for (c, sample) in [&pair.original, &pair.reconstruction].into_iter().enumerate() {
            let (_, _, px) = to_pixels(sample, &grid.shape);
            let (ox, oy) = (GAP + c as u32 * (cw + GAP), GAP + r as u32 * (ch + GAP));
            for y in 0..ch {
                for x in 0..cw {
                    img.put_pixel(ox + x, oy + y, Rgb(px[((y / scale) * w + x / scale) as usize]));
                }
            }
        }
    }
    img
}

/// Writes `bars_<metric>.png` for every metric with at least one baseline
/// of the same name, and `samples.png` when the report carries a grid.
/// Returns the written file names.
pub fn write_figures(report: &EvaluationReport, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, m) in &report.metrics {
        let mut values = vec![(m.value, true)];
        values.extend(
            report
                .baselines
                .iter()
                .filter(|(b, _)| b.rsplit('.').next() == Some(name.as_str()))
                .map(|(_, b)| (b.value, false)),
        );
        if values.len() > 1 {
            let file = format!("bars_{name}.png");
            save_png(&bar_chart(&values), &dir.join(&file))?;
            written.push(file);
        }
    }
    if let Some(grid) = &report.grid {
        save_png(&sample_grid(grid, 3), &dir.join("samples.png"))?;
        written.push("samples.png".into());
    }
    Ok(written)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
