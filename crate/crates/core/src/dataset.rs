//! Labeled datasets, disjoint splits and updating-set sampling.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::{config, data, rng, Result, SampleSet};

/// Samples with class labels. Features are stored flat, one row per sample;
/// `shape` is the per-sample layout (`[1, 28, 28]` for MNIST, `[168]` for
/// the check-in surrogate).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: SampleSet,
    shape: Vec<usize>,
    labels: Vec<u32>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f32>,
        shape: Vec<usize>,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if num_classes == 0 {
            return Err(data!("num_classes must be positive"));
        }
        let samples = SampleSet::new(features, dim)?;
        if samples.len() != labels.len() {
            return Err(data!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(data!("label {bad} outside [0, {num_classes})"));
        }
        Ok(Self {
            samples,
            shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn feature_len(&self) -> usize {
        self.samples.dim()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.samples.row(i)
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn features(&self) -> &[f32] {
        self.samples.as_slice()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: self.samples.select(indices),
            shape: self.shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Fraction of samples per class.
    pub fn label_distribution(&self) -> Vec<f64> {
        label_histogram(&self.labels, self.num_classes)
    }
}

/// Normalized label histogram over `num_classes` classes.
pub fn label_histogram(labels: &[u32], num_classes: usize) -> Vec<f64> {
    let mut hist = alloc::vec![0f64; num_classes];
    for &l in labels {
        hist[l as usize] += 1.0;
    }
    if !labels.is_empty() {
        let n = labels.len() as f64;
        hist.iter_mut().for_each(|h| *h /= n);
    }
    hist
}

/// Sizes of the target / shadow / probe partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub target_size: usize,
    pub shadow_size: usize,
    pub probe_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub const DEFAULT_PROBE_SIZE: usize = 100;

    pub fn total(&self) -> usize {
        self.target_size + self.shadow_size + self.probe_size
    }
}

/// Index lists of a three-way split, each into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub target: Vec<usize>,
    pub shadow: Vec<usize>,
    pub probe: Vec<usize>,
}

/// Seeded disjoint partition of `0..n`. Deterministic in `plan.seed`.
pub fn split_indices(n: usize, plan: &SplitPlan) -> Result<SplitIndices> {
    if plan.total() > n {
        return Err(config!(
            "split sizes {} + {} + {} exceed the {n} available samples",
            plan.target_size,
            plan.shadow_size,
            plan.probe_size
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(plan.seed, 0));
    let (target, rest) = order.split_at(plan.target_size);
    let (shadow, rest) = rest.split_at(plan.shadow_size);
    Ok(SplitIndices {
        target: target.to_vec(),
        shadow: shadow.to_vec(),
        probe: rest[..plan.probe_size].to_vec(),
    })
}

/// Splits `ds` into disjoint target, shadow and probe datasets.
pub fn split_three_way(
    ds: &LabeledDataset,
    plan: &SplitPlan,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset, SplitIndices)> {
    let idx = split_indices(ds.len(), plan)?;
    Ok((
        ds.subset(&idx.target),
        ds.subset(&idx.shadow),
        ds.subset(&idx.probe),
        idx,
    ))
}

/// Cuts a (target or shadow) split into its training part and the pool the
/// updating sets are drawn from. The two parts are disjoint.
pub fn split_train_pool(
    ds: &LabeledDataset,
    train_size: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if train_size > ds.len() {
        return Err(config!(
            "training size {train_size} exceeds split size {}",
            ds.len()
        ));
    }
    let train: Vec<usize> = (0..train_size).collect();
    let pool: Vec<usize> = (train_size..ds.len()).collect();
    Ok((ds.subset(&train), ds.subset(&pool)))
}

/// `m` updating sets of equal cardinality, as index lists into a pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatingSetBatch {
    pub sets: Vec<Vec<usize>>,
    pub cardinality: usize,
}

impl UpdatingSetBatch {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Draws `m` updating sets of `cardinality` pool indices. Within a set the
/// draw is uniform without replacement; different sets may overlap. Set `i`
/// uses its own RNG stream so the batch is reproducible in any order.
pub fn sample_updating_sets(
    pool_len: usize,
    cardinality: usize,
    m: usize,
    seed: u64,
) -> Result<UpdatingSetBatch> {
    if cardinality == 0 {
        return Err(config!("updating-set cardinality must be positive"));
    }
    if cardinality > pool_len {
        return Err(config!(
            "updating-set cardinality {cardinality} exceeds pool size {pool_len}"
        ));
    }
    if m == 0 {
        return Err(config!("number of updating sets must be at least 1"));
    }
    let sets = (0..m)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            rand::seq::index::sample(&mut rng, pool_len, cardinality).into_vec()
        })
        .collect();
    Ok(UpdatingSetBatch { sets, cardinality })
}

/// Checks that a probability vector lies on the simplex.
pub fn check_simplex(p: &[f64], tol: f64) -> Result<()> {
    if p.is_empty() {
        return Err(data!("empty probability vector"));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(data!("probability vector has negative or non-finite entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(data!("probability vector sums to {sum}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy(n: usize) -> LabeledDataset {
        let features = (0..n * 2).map(|i| (i % 7) as f32 / 7.0).collect();
        let labels = (0..n).map(|i| (i % 3) as u32).collect();
        LabeledDataset::new(features, vec![2], labels, 3).unwrap()
    }

    #[test]
    fn dataset_invariants_are_checked() {
        assert!(LabeledDataset::new(vec![0.0; 4], vec![2], vec![0], 2).is_err());
        assert!(LabeledDataset::new(vec![0.0; 4], vec![2], vec![0, 2], 2).is_err());
        assert!(LabeledDataset::new(vec![0.0; 4], vec![2], vec![0, 1], 2).is_ok());
    }

    #[test]
    fn exhaustive_split_is_a_partition() {
        let ds = toy(30);
        let plan = SplitPlan { target_size: 10, shadow_size: 15, probe_size: 5, seed: 3 };
        let idx = split_indices(ds.len(), &plan).unwrap();
        let mut all: Vec<usize> = idx.target.iter().chain(&idx.shadow).chain(&idx.probe).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_and_validated() {
        let plan = SplitPlan { target_size: 10, shadow_size: 10, probe_size: 5, seed: 11 };
        assert_eq!(split_indices(40, &plan).unwrap(), split_indices(40, &plan).unwrap());
        assert!(matches!(split_indices(24, &plan), Err(crate::Error::Config(_))));
        let (t, s, p, _) = split_three_way(&toy(25), &plan).unwrap();
        assert_eq!((t.len(), s.len(), p.len()), (10, 10, 5));
    }

    #[test]
    fn updating_sets_have_exact_cardinality() {
        let b = sample_updating_sets(50, 7, 20, 1).unwrap();
        assert_eq!(b.len(), 20);
        for s in &b.sets {
            assert_eq!(s.len(), 7);
            let mut d = s.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 7);
            assert!(s.iter().all(|&i| i < 50));
        }
        assert_eq!(b, sample_updating_sets(50, 7, 20, 1).unwrap());
    }

    #[test]
    fn exhaustive_draw_takes_whole_pool() {
        let b = sample_updating_sets(5, 5, 1, 9).unwrap();
        let mut s = b.sets[0].clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        assert!(sample_updating_sets(5, 6, 1, 9).is_err());
        assert!(sample_updating_sets(5, 1, 0, 9).is_err());
    }

    #[test]
    fn histogram_normalizes() {
        let h = label_histogram(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], 4);
        assert_eq!(h, vec![0.5, 0.5, 0.0, 0.0]);
        check_simplex(&h, 1e-12).unwrap();
        assert!(check_simplex(&[0.5, 0.6], 1e-6).is_err());
    }

    #[test]
    fn train_pool_are_disjoint() {
        let ds = toy(10);
        let (train, pool) = split_train_pool(&ds, 6).unwrap();
        assert_eq!((train.len(), pool.len()), (6, 4));
        assert_eq!(pool.sample(0), ds.sample(6));
        assert!(split_train_pool(&ds, 11).is_err());
    }
}
