//! Evaluation metrics. MSE is the per-feature mean squared error.

use alloc::vec::Vec;

use crate::assignment::{hungarian_match, Assignment};
use crate::dataset::check_simplex;
use crate::loss::kl_divergence;
use crate::samples::squared_distance_f64;
use crate::{usage, Result, SampleSet};

/// Tolerance for simplex checks on model outputs.
pub const SIMPLEX_TOL: f64 = 1e-5;

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(usage!("MSE of vectors of length {} and {}", a.len(), b.len()));
    }
    Ok(squared_distance_f64(a, b) / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedMse {
    pub mean: f64,
    /// `assignment.pairs[i]` is the truth sample matched to reconstruction `i`.
    pub assignment: Assignment,
}

/// Hungarian-matched mean MSE between two equally sized sets.
pub fn matched_set_mse(recon: &SampleSet, truth: &SampleSet) -> Result<MatchedMse> {
    let n = recon.len();
    if n == 0 || truth.len() != n {
        return Err(usage!("matched MSE needs equal non-empty sets ({n} vs {})", truth.len()));
    }
    if recon.dim() != truth.dim() {
        return Err(usage!("sample shapes differ"));
    }
    let mut cost = Vec::with_capacity(n * n);
    for r in recon.rows() {
        for t in truth.rows() {
            cost.push(mse(r, t)?);
        }
    }
    let assignment = hungarian_match(&cost, n)?;
    Ok(MatchedMse { mean: assignment.total_cost / n as f64, assignment })
}

/// Mean over truth samples of the MSE to the nearest candidate. Candidates
/// may serve several truth samples, so this lower-bounds any one-to-one
/// matching drawn from the same candidates.
pub fn one_to_one_oracle(candidates: &SampleSet, truth: &SampleSet) -> Result<f64> {
    if candidates.is_empty() || truth.is_empty() {
        return Err(usage!("one-to-one match needs candidates and truth samples"));
    }
    if candidates.dim() != truth.dim() {
        return Err(usage!("sample shapes differ"));
    }
    let dim = truth.dim() as f64;
    let total: f64 = truth
        .rows()
        .map(|t| {
            candidates
                .rows()
                .map(|c| squared_distance_f64(c, t))
                .fold(f64::INFINITY, f64::min)
                / dim
        })
        .sum();
    Ok(total / truth.len() as f64)
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-instance label metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMetrics {
    /// Prediction argmax equals the target argmax.
    pub correct: bool,
    /// Prediction argmax is one of the target's most frequent labels.
    pub top_label_hit: bool,
    /// `KL(predicted ‖ target)`.
    pub kl: f64,
}

pub fn label_metrics(predicted: &[f64], target: &[f64]) -> Result<LabelMetrics> {
    check_simplex(predicted, SIMPLEX_TOL)?;
    check_simplex(target, SIMPLEX_TOL)?;
    if predicted.len() != target.len() {
        return Err(usage!("label vectors of length {} and {}", predicted.len(), target.len()));
    }
    let guess = argmax(predicted);
    let top = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LabelMetrics {
        correct: guess == argmax(target),
        top_label_hit: target[guess] == top,
        kl: kl_divergence(predicted, target)?,
    })
}

/// Averages of [`LabelMetrics`] over a test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSummary {
    pub accuracy: f64,
    pub top_label_accuracy: f64,
    pub mean_kl: f64,
}

pub fn summarize_labels<'a>(
    pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
) -> Result<LabelSummary> {
    let (mut n, mut correct, mut top, mut kl) = (0usize, 0usize, 0usize, 0f64);
    for (p, t) in pairs {
        let m = label_metrics(p, t)?;
        n += 1;
        correct += usize::from(m.correct);
        top += usize::from(m.top_label_hit);
        kl += m.kl;
    }
    if n == 0 {
        return Err(usage!("no instances to summarize"));
    }
    let n = n as f64;
    Ok(LabelSummary {
        accuracy: correct as f64 / n,
        top_label_accuracy: top as f64 / n,
        mean_kl: kl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn permuted_reconstruction_scores_zero() {
        let truth = SampleSet::from_rows(&[[0.0f32, 1.0], [0.5, 0.5], [1.0, 0.0]]).unwrap();
        let recon = truth.select(&[2, 0, 1]);
        let m = matched_set_mse(&recon, &truth).unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.assignment.pairs, vec![2, 0, 1]);
    }

    #[test]
    fn oracle_with_superset_and_single_candidate() {
        let truth = SampleSet::from_rows(&[[0.0f32, 1.0], [1.0, 0.0]]).unwrap();
        let cands = SampleSet::from_rows(&[[0.3f32, 0.3], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(one_to_one_oracle(&cands, &truth).unwrap(), 0.0);
        let one = SampleSet::from_rows(&[[0.0f32, 0.0]]).unwrap();
        assert_eq!(one_to_one_oracle(&one, &truth).unwrap(), 0.5);
        assert!(one_to_one_oracle(&SampleSet::empty(2), &truth).is_err());
    }

    #[test]
    fn size_mismatch_is_usage_error() {
        let a = SampleSet::from_rows(&[[0.0f32]]).unwrap();
        let b = SampleSet::from_rows(&[[0.0f32], [1.0]]).unwrap();
        assert!(matches!(matched_set_mse(&a, &b), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn perfect_prediction() {
        let t = [0.1, 0.7, 0.2];
        let m = label_metrics(&t, &t).unwrap();
        assert!(m.correct && m.top_label_hit);
        assert_eq!(m.kl, 0.0);
        assert!(label_metrics(&[0.5, 0.6, 0.0], &t).is_err());
    }

    #[test]
    fn top_label_accepts_ties_in_target() {
        let m = label_metrics(&[0.0, 1.0, 0.0], &[0.4, 0.4, 0.2]).unwrap();
        assert!(m.top_label_hit);
        assert!(!m.correct);
    }
}
