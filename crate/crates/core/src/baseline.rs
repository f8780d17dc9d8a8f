//! Reference attacks that ignore the posterior difference.
//!
//! Stochastic baselines average over `draws` seeded repetitions.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::cluster::{cluster_reconstruct, KMeansParams, ReconstructionSet};
use crate::dataset::{label_histogram, LabeledDataset};
use crate::metrics::{mse, summarize_labels, LabelSummary};
use crate::{rng, usage, Result, SampleSet};

/// Default number of repetitions for stochastic baselines.
pub const DEFAULT_DRAWS: usize = 10;

/// Accuracy of guessing a uniformly random class.
pub fn random_label_accuracy(truth: &[u32], num_classes: usize, draws: usize, seed: u64) -> Result<f64> {
    if truth.is_empty() || num_classes == 0 {
        return Err(usage!("random-label baseline needs labels and classes"));
    }
    let mut hits = 0usize;
    for d in 0..draws.max(1) {
        let mut rng = rng::stream(seed, d as u64);
        hits += truth
            .iter()
            .filter(|&&t| rng.random_range(0..num_classes) as u32 == t)
            .count();
    }
    Ok(hits as f64 / (truth.len() * draws.max(1)) as f64)
}

fn check_shapes(shadow: &LabeledDataset, truth: &SampleSet) -> Result<()> {
    if shadow.is_empty() {
        return Err(usage!("baseline needs a non-empty shadow dataset"));
    }
    if shadow.feature_len() != truth.dim() {
        return Err(usage!("shadow samples and truth samples differ in shape"));
    }
    Ok(())
}

/// Per-truth MSE to a random shadow sample.
pub fn random_sample_mse(shadow: &LabeledDataset, truth: &SampleSet, draws: usize, seed: u64) -> Result<Vec<f64>> {
    check_shapes(shadow, truth)?;
    let draws = draws.max(1);
    let mut out = vec![0f64; truth.len()];
    for d in 0..draws {
        let mut rng = rng::stream(seed, d as u64);
        for (o, t) in out.iter_mut().zip(truth.rows()) {
            *o += mse(shadow.sample(rng.random_range(0..shadow.len())), t)?;
        }
    }
    out.iter_mut().for_each(|o| *o /= draws as f64);
    Ok(out)
}

/// Per-truth MSE to a random shadow sample carrying the label the label
/// inference attack predicted. Classes absent from the shadow data fall back
/// to a random sample.
pub fn label_random_sample_mse(
    shadow: &LabeledDataset,
    inferred: &[u32],
    truth: &SampleSet,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_shapes(shadow, truth)?;
    if inferred.len() != truth.len() {
        return Err(usage!("{} inferred labels for {} truth samples", inferred.len(), truth.len()));
    }
    let by_class = indices_by_class(shadow);
    let draws = draws.max(1);
    let mut out = vec![0f64; truth.len()];
    for d in 0..draws {
        let mut rng = rng::stream(seed, d as u64);
        for ((o, t), &l) in out.iter_mut().zip(truth.rows()).zip(inferred) {
            let members = by_class.get(l as usize).filter(|m| !m.is_empty());
            let pick = match members {
                Some(m) => m[rng.random_range(0..m.len())],
                None => rng.random_range(0..shadow.len()),
            };
            *o += mse(shadow.sample(pick), t)?;
        }
    }
    out.iter_mut().for_each(|o| *o /= draws as f64);
    Ok(out)
}

fn indices_by_class(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    by_class
}

/// Mean shadow sample of every class (zeros for absent classes).
pub fn class_means(shadow: &LabeledDataset) -> SampleSet {
    let dim = shadow.feature_len();
    let mut sums = vec![0f64; shadow.num_classes() * dim];
    let mut counts = vec![0usize; shadow.num_classes()];
    for i in 0..shadow.len() {
        let l = shadow.label(i) as usize;
        counts[l] += 1;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(shadow.sample(i)) {
            *s += f64::from(v);
        }
    }
    let data = sums
        .chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |&s| if c == 0 { 0.0 } else { (s / c as f64) as f32 }))
        .collect();
    SampleSet::new(data, dim).expect("class rows")
}

/// Per-truth MSE to the mean shadow sample of the truth's own class.
pub fn label_average_mse(shadow: &LabeledDataset, truth: &SampleSet, truth_labels: &[u32]) -> Result<Vec<f64>> {
    check_shapes(shadow, truth)?;
    if truth_labels.len() != truth.len() {
        return Err(usage!("{} labels for {} truth samples", truth_labels.len(), truth.len()));
    }
    let means = class_means(shadow);
    truth
        .rows()
        .zip(truth_labels)
        .map(|(t, &l)| {
            if l as usize >= means.len() {
                return Err(usage!("label {l} outside the shadow label space"));
            }
            mse(means.row(l as usize), t)
        })
        .collect()
}

/// K-means on the shadow dataset; the centroid-nearest members serve as the
/// reconstruction of every updating set.
pub fn shadow_clustering(shadow: &LabeledDataset, params: &KMeansParams) -> Result<ReconstructionSet> {
    cluster_reconstruct(shadow.samples(), params)
}

/// Label histogram of a uniform draw of `cardinality` shadow samples.
pub fn random_distribution(shadow_labels: &[u32], num_classes: usize, cardinality: usize, rng: &mut rng::Rng) -> Result<Vec<f64>> {
    if cardinality == 0 || cardinality > shadow_labels.len() {
        return Err(usage!("cannot draw {cardinality} of {} shadow samples", shadow_labels.len()));
    }
    let picked: Vec<u32> = rand::seq::index::sample(rng, shadow_labels.len(), cardinality)
        .into_iter()
        .map(|i| shadow_labels[i])
        .collect();
    Ok(label_histogram(&picked, num_classes))
}

/// Label metrics of the random-distribution guess against each target
/// distribution, averaged over `draws` guesses per target.
pub fn random_distribution_metrics(
    shadow: &LabeledDataset,
    targets: &[Vec<f64>],
    cardinality: usize,
    draws: usize,
    seed: u64,
) -> Result<LabelSummary> {
    let mut guesses = Vec::with_capacity(targets.len() * draws.max(1));
    for d in 0..draws.max(1) {
        let mut rng = rng::stream(seed, d as u64);
        for _ in targets {
            guesses.push(random_distribution(shadow.labels(), shadow.num_classes(), cardinality, &mut rng)?);
        }
    }
    let n = targets.len();
    summarize_labels(
        guesses
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_slice(), targets[i % n].as_slice())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> LabeledDataset {
        // All class-0 samples equal, all class-1 samples equal.
        let features = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        LabeledDataset::new(features, vec![2], vec![0, 1, 0, 1], 2).unwrap()
    }

    #[test]
    fn random_label_on_balanced_classes() {
        let truth: Vec<u32> = (0..5000).map(|i| (i % 10) as u32).collect();
        let acc = random_label_accuracy(&truth, 10, DEFAULT_DRAWS, 3).unwrap();
        assert!((acc - 0.1).abs() < 0.01, "{acc}");
    }

    #[test]
    fn label_average_is_zero_on_degenerate_classes() {
        let ds = two_class();
        let truth = SampleSet::from_rows(&[[1.0f32, 1.0], [0.0, 0.0]]).unwrap();
        let v = label_average_mse(&ds, &truth, &[1, 0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        let inferred = label_random_sample_mse(&ds, &[1, 0], &truth, 4, 0).unwrap();
        assert_eq!(inferred, vec![0.0, 0.0]);
    }

    #[test]
    fn random_distribution_is_a_histogram() {
        let ds = two_class();
        let h = random_distribution(ds.labels(), 2, 4, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(h, vec![0.5, 0.5]);
        assert!(random_distribution(ds.labels(), 2, 5, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn baselines_validate_context() {
        let ds = two_class();
        let truth = SampleSet::from_rows(&[[1.0f32, 1.0, 1.0]]).unwrap();
        assert!(random_sample_mse(&ds, &truth, 1, 0).is_err());
        assert!(random_label_accuracy(&[], 3, 1, 0).is_err());
    }
}
