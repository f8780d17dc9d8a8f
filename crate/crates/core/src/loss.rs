//! Reference implementations of the attack losses in `f64`.
//!
//! The training code evaluates the same formulas on tensors with automatic
//! differentiation; these versions are the independent second route used to
//! check values and gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::samples::squared_distance_f64;
use crate::{usage, Result, SampleSet};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-8;

/// Clamp applied to discriminator scores.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct BestMatch {
    /// Σ over truth samples of the squared error to the closest generated sample.
    pub reconstruction: f64,
    /// −mean log D(x̂): minimizing it raises the discriminator's realness score.
    pub adversarial: f64,
    /// `reconstruction + adversarial_weight · adversarial`.
    pub total: f64,
    /// For each truth sample, the index of its closest generated sample
    /// (lowest index on ties).
    pub matches: Vec<usize>,
}

/// Closest generated sample for every truth sample.
pub fn best_matches(generated: &SampleSet, truth: &SampleSet) -> Result<Vec<(usize, f64)>> {
    if generated.is_empty() || truth.is_empty() {
        return Err(usage!("best-match loss needs generated and truth samples"));
    }
    if generated.dim() != truth.dim() {
        return Err(usage!(
            "generated samples have {} features, truth has {}",
            generated.dim(),
            truth.dim()
        ));
    }
    Ok(truth
        .rows()
        .map(|t| {
            let mut best = (0, f64::INFINITY);
            for (j, g) in generated.rows().enumerate() {
                let d = squared_distance_f64(g, t);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect())
}

/// The generator objective: best-match reconstruction plus adversarial term.
pub fn best_match_loss(
    generated: &SampleSet,
    truth: &SampleSet,
    d_scores: &[f64],
    adversarial_weight: f64,
) -> Result<BestMatch> {
    if d_scores.len() != generated.len() {
        return Err(usage!(
            "{} discriminator scores for {} generated samples",
            d_scores.len(),
            generated.len()
        ));
    }
    let matches = best_matches(generated, truth)?;
    let reconstruction = matches.iter().map(|m| m.1).sum();
    let adversarial = -d_scores
        .iter()
        .map(|&s| libm::log(s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)))
        .sum::<f64>()
        / d_scores.len() as f64;
    Ok(BestMatch {
        reconstruction,
        adversarial,
        total: reconstruction + adversarial_weight * adversarial,
        matches: matches.into_iter().map(|m| m.0).collect(),
    })
}

/// Gradient of the reconstruction term with respect to the generated
/// samples: each generated sample receives `2 (x̂ − x)` from every truth
/// sample it is the best match of.
pub fn best_match_gradient(generated: &SampleSet, truth: &SampleSet) -> Result<SampleSet> {
    let matches = best_matches(generated, truth)?;
    let dim = generated.dim();
    let mut grad = vec![0f32; generated.len() * dim];
    for (t, &(j, _)) in matches.iter().enumerate() {
        let g = generated.row(j);
        for ((out, &gv), &tv) in grad[j * dim..(j + 1) * dim].iter_mut().zip(g).zip(truth.row(t)) {
            *out += 2.0 * (gv - tv);
        }
    }
    SampleSet::new(grad, dim)
}

/// The discriminator's objective `E log D(x) + E log(1 − D(x̂))`, to be
/// maximized. Scores are clamped to `[ε, 1 − ε]`.
pub fn discriminator_objective(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(usage!("discriminator objective needs real and fake scores"));
    }
    let clamp = |s: f64| s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let real = real_scores.iter().map(|&s| libm::log(clamp(s))).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|&s| libm::log(1.0 - clamp(s))).sum::<f64>() / fake_scores.len() as f64;
    Ok(real + fake)
}

/// The quantity minimized when training the discriminator.
pub fn discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    discriminator_objective(real_scores, fake_scores).map(|v| -v)
}

/// `Σ p̂_i log(p̂_i / q_i)` with `p̂` the prediction and `q` the target.
/// Both arguments are clamped at [`PROB_EPS`] inside the logarithm; terms with
/// `p̂_i = 0` contribute nothing.
pub fn kl_divergence(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(usage!(
            "KL divergence of vectors of length {} and {}",
            predicted.len(),
            target.len()
        ));
    }
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(&p, &q)| {
            if p == 0.0 {
                0.0
            } else {
                p * (libm::log(p.max(PROB_EPS)) - libm::log(q.max(PROB_EPS)))
            }
        })
        .sum())
}

/// `−Σ ℓ_i log ℓ̂_i`, the negative log-likelihood of the true label
/// distribution under the prediction.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(usage!("cross entropy of mismatched vectors"));
    }
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * libm::log(p.max(PROB_EPS)) })
        .sum::<f64>())
}
