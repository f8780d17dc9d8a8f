//! Attack corpora: posterior differences of many updated model copies paired
//! with the updating sets that caused them.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use updateleak_core::dataset::{label_histogram, LabeledDataset, UpdatingSetBatch};
use updateleak_core::noise::NoisePolicy;
use updateleak_core::posterior::{posterior_difference, ProbeFingerprint};
use updateleak_core::{rng, SampleSet};

use crate::container::{Array, Container};
use crate::data::ProbeSet;
use crate::defense::noisy_probe;
use crate::error::usage;
use crate::victim::{probe, update_classifier, ClassifierHandle};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Shadow,
    Target,
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub role: Role,
    pub arch_id: String,
    pub update_epochs: usize,
    pub sets_seed: u64,
    pub update_seed: u64,
    pub noise: Option<NoiseRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub scale: f32,
    pub renormalize: bool,
    pub seed: u64,
}

impl From<&NoisePolicy> for NoiseRecord {
    fn from(p: &NoisePolicy) -> Self {
        Self {
            scale: p.scale,
            renormalize: p.renormalize,
            seed: p.seed,
        }
    }
}

/// The members of one updating set (indices into the update pool) and their
/// labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateTarget {
    pub members: Vec<usize>,
    pub labels: Vec<u32>,
}

/// Ground truth per corpus row, in the form an attack consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Sets(Vec<UpdateTarget>),
    Labels(Vec<u32>),
    Distributions(Vec<Vec<f64>>),
    Samples(Vec<SampleSet>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Sets(v) => v.len(),
            Targets::Labels(v) => v.len(),
            Targets::Distributions(v) => v.len(),
            Targets::Samples(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            Targets::Sets(v) => Targets::Sets(rows.iter().map(|&i| v[i].clone()).collect()),
            Targets::Labels(v) => Targets::Labels(rows.iter().map(|&i| v[i]).collect()),
            Targets::Distributions(v) => Targets::Distributions(rows.iter().map(|&i| v[i].clone()).collect()),
            Targets::Samples(v) => Targets::Samples(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Label,
    Distribution,
    Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackCorpus {
    deltas: Vec<f32>,
    delta_len: usize,
    fingerprint: ProbeFingerprint,
    num_classes: usize,
    cardinalities: Vec<usize>,
    targets: Targets,
    provenance: Provenance,
}

impl AttackCorpus {
    pub fn new(
        deltas: Vec<f32>,
        delta_len: usize,
        fingerprint: ProbeFingerprint,
        num_classes: usize,
        cardinalities: Vec<usize>,
        targets: Targets,
        provenance: Provenance,
    ) -> Result<Self> {
        if delta_len == 0 || deltas.len() != delta_len * cardinalities.len() {
            return Err(usage("delta matrix does not match the number of rows"));
        }
        if targets.len() != cardinalities.len() {
            return Err(usage(format!(
                "{} deltas but {} targets",
                cardinalities.len(),
                targets.len()
            )));
        }
        if let Targets::Distributions(d) = &targets {
            for p in d {
                updateleak_core::dataset::check_simplex(p, 1e-6)?;
            }
        }
        Ok(Self {
            deltas,
            delta_len,
            fingerprint,
            num_classes,
            cardinalities,
            targets,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cardinalities.is_empty()
    }

    pub fn delta(&self, i: usize) -> &[f32] {
        &self.deltas[i * self.delta_len..(i + 1) * self.delta_len]
    }

    pub fn deltas(&self) -> &[f32] {
        &self.deltas
    }

    pub fn delta_len(&self) -> usize {
        self.delta_len
    }

    pub fn fingerprint(&self) -> ProbeFingerprint {
        self.fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    /// The common cardinality, or `None` for a mixed corpus.
    pub fn cardinality(&self) -> Option<usize> {
        let first = *self.cardinalities.first()?;
        self.cardinalities.iter().all(|&c| c == first).then_some(first)
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Rows `rows` of this corpus, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut deltas = Vec::with_capacity(rows.len() * self.delta_len);
        for &i in rows {
            deltas.extend_from_slice(self.delta(i));
        }
        Self {
            deltas,
            delta_len: self.delta_len,
            fingerprint: self.fingerprint,
            num_classes: self.num_classes,
            cardinalities: rows.iter().map(|&i| self.cardinalities[i]).collect(),
            targets: self.targets.select(rows),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` rows (all of them if `n` is 0 or too large).
    pub fn head(&self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Concatenates corpora that share a probing set; rows keep their own
    /// cardinality tags. Used for mixed-cardinality training.
    pub fn concat(parts: &[AttackCorpus]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| usage("nothing to concatenate"))?;
        let mut deltas = Vec::new();
        let mut cards = Vec::new();
        let mut sets = Vec::new();
        for p in parts {
            if p.fingerprint != first.fingerprint || p.delta_len != first.delta_len {
                return Err(usage("corpora were probed with different probing sets"));
            }
            let Targets::Sets(s) = &p.targets else {
                return Err(usage("only unprojected corpora can be concatenated"));
            };
            deltas.extend_from_slice(&p.deltas);
            cards.extend_from_slice(&p.cardinalities);
            sets.extend(s.iter().cloned());
        }
        Self::new(
            deltas,
            first.delta_len,
            first.fingerprint,
            first.num_classes,
            cards,
            Targets::Sets(sets),
            first.provenance.clone(),
        )
    }

    /// Projects full updating sets to what an attack needs. `pool` is the
    /// dataset the sets index into (needed for `Samples`).
    pub fn project_targets(&self, mode: Projection, pool: &LabeledDataset) -> Result<Self> {
        let Targets::Sets(sets) = &self.targets else {
            return Err(usage("corpus targets are already projected"));
        };
        let targets = match mode {
            Projection::Label => {
                if self.cardinalities.iter().any(|&c| c != 1) {
                    return Err(usage("label projection needs cardinality 1"));
                }
                Targets::Labels(sets.iter().map(|s| s.labels[0]).collect())
            }
            Projection::Distribution => Targets::Distributions(
                sets.iter()
                    .map(|s| label_histogram(&s.labels, self.num_classes))
                    .collect(),
            ),
            Projection::Samples => {
                if sets.iter().flat_map(|s| &s.members).any(|&m| m >= pool.len()) {
                    return Err(usage("updating set indexes past the end of the pool"));
                }
                Targets::Samples(
                    sets.iter()
                        .map(|s| pool.samples().select(&s.members))
                        .collect(),
                )
            }
        };
        Self::new(
            self.deltas.clone(),
            self.delta_len,
            self.fingerprint,
            self.num_classes,
            self.cardinalities.clone(),
            targets,
            self.provenance.clone(),
        )
    }

    pub fn labels(&self) -> Result<&[u32]> {
        match &self.targets {
            Targets::Labels(l) => Ok(l),
            _ => Err(usage("corpus targets are not labels")),
        }
    }

    pub fn distributions(&self) -> Result<&[Vec<f64>]> {
        match &self.targets {
            Targets::Distributions(d) => Ok(d),
            _ => Err(usage("corpus targets are not label distributions")),
        }
    }

    pub fn sample_sets(&self) -> Result<&[SampleSet]> {
        match &self.targets {
            Targets::Samples(s) => Ok(s),
            _ => Err(usage("corpus targets are not sample sets")),
        }
    }

    pub fn update_sets(&self) -> Result<&[UpdateTarget]> {
        match &self.targets {
            Targets::Sets(s) => Ok(s),
            _ => Err(usage("corpus targets are projected")),
        }
    }

    /// Writes an unprojected corpus.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let sets = self.update_sets()?;
        let mut c = Container::new("corpus", config_hash);
        c.set_meta("probe_fingerprint", format!("{:016x}", self.fingerprint.0));
        c.set_meta("num_classes", self.num_classes.to_string());
        c.set_meta(
            "cardinality",
            self.cardinality().map_or("mixed".to_string(), |k| k.to_string()),
        );
        c.set_meta("provenance", serde_json::to_string(&self.provenance).expect("provenance serializes"));
        c.insert("deltas", Array::f32(vec![self.len(), self.delta_len], self.deltas.clone()));
        c.insert("cardinalities", Array::i64(self.cardinalities.iter().map(|&k| k as i64).collect()));
        c.insert(
            "members",
            Array::i64(sets.iter().flat_map(|s| s.members.iter().map(|&m| m as i64)).collect()),
        );
        c.insert(
            "member_labels",
            Array::i64(sets.iter().flat_map(|s| s.labels.iter().map(|&l| l as i64)).collect()),
        );
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = Container::load(path)?;
        if c.kind() != Some("corpus") {
            return Err(Error::format(path, "not a corpus file"));
        }
        let fp = c
            .meta("probe_fingerprint")
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| Error::format(path, "missing probe fingerprint"))?;
        let num_classes: usize = c
            .meta("num_classes")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "missing num_classes"))?;
        let provenance: Provenance = serde_json::from_str(c.meta("provenance").unwrap_or(""))
            .map_err(|e| Error::format(path, format!("provenance: {e}")))?;
        let deltas = c.array("deltas", path)?;
        let delta_len = *deltas.shape().get(1).ok_or_else(|| Error::format(path, "deltas must be 2-D"))?;
        let cards: Vec<usize> = c.i64s("cardinalities", path)?.iter().map(|&k| k as usize).collect();
        let members = c.i64s("members", path)?;
        let labels = c.i64s("member_labels", path)?;
        if members.len() != cards.iter().sum::<usize>() || labels.len() != members.len() {
            return Err(Error::format(path, "target block does not match cardinalities"));
        }
        let mut sets = Vec::with_capacity(cards.len());
        let mut at = 0;
        for &k in &cards {
            sets.push(UpdateTarget {
                members: members[at..at + k].iter().map(|&m| m as usize).collect(),
                labels: labels[at..at + k].iter().map(|&l| l as u32).collect(),
            });
            at += k;
        }
        let corpus = Self::new(
            deltas.as_f32().ok_or_else(|| Error::format(path, "deltas must be f32"))?.to_vec(),
            delta_len,
            ProbeFingerprint(fp),
            num_classes,
            cards,
            Targets::Sets(sets),
            provenance,
        )?;
        Ok((corpus, c))
    }
}

/// Knobs of one corpus build besides the model and the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    pub role: Role,
    pub update_epochs: usize,
    pub sets_seed: u64,
    pub update_seed: u64,
    /// Output noise applied to every posterior the model emits.
    pub noise: Option<NoisePolicy>,
}

/// Updates a fresh copy of `base` with every set of `batch`, probes it, and
/// records `δ = probe(base) − probe(updated)`. The base is probed once. Row
/// `i` depends only on set `i` and its own seed stream, so the m tasks run
/// in parallel and are merged in set order.
pub fn build_corpus(
    base: &ClassifierHandle,
    update_pool: &LabeledDataset,
    probe_set: &ProbeSet,
    batch: &UpdatingSetBatch,
    opts: &CorpusOptions,
) -> Result<AttackCorpus> {
    if batch.is_empty() {
        return Err(usage("no updating sets"));
    }
    if batch.sets.iter().flatten().any(|&i| i >= update_pool.len()) {
        return Err(usage("updating set indexes past the end of the pool"));
    }
    let emit = |m: &ClassifierHandle, query: u64| match &opts.noise {
        Some(policy) => noisy_probe(m, probe_set, policy, query),
        None => probe(m, probe_set),
    };
    let before = emit(base, 0)?;
    let rows: Vec<(Vec<f32>, UpdateTarget)> = batch
        .sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let update = update_pool.subset(set);
            let seed = rng::derive(opts.update_seed, "update") ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let updated = update_classifier(base, &update, opts.update_epochs, seed)?;
            let after = emit(&updated, i as u64 + 1)?;
            let d = posterior_difference(&before, &after)?;
            Ok((
                d.into_values(),
                UpdateTarget {
                    members: set.clone(),
                    labels: update.labels().to_vec(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    let delta_len = before.num_rows() * before.num_classes();
    let mut deltas = Vec::with_capacity(rows.len() * delta_len);
    let mut targets = Vec::with_capacity(rows.len());
    for (d, t) in rows {
        deltas.extend(d);
        targets.push(t);
    }
    AttackCorpus::new(
        deltas,
        delta_len,
        before.fingerprint(),
        base.num_classes(),
        vec![batch.cardinality; batch.len()],
        Targets::Sets(targets),
        Provenance {
            role: opts.role,
            arch_id: base.arch().id().to_string(),
            update_epochs: opts.update_epochs,
            sets_seed: opts.sets_seed,
            update_seed: opts.update_seed,
            noise: opts.noise.as_ref().map(NoiseRecord::from),
        },
    )
}
