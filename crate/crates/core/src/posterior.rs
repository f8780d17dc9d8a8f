//! Posterior matrices and the posterior difference δ.

use alloc::vec::Vec;
use core::hash::Hasher;

use crate::{data, usage, Result};

/// Identifies a probing set by its ordered source indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProbeFingerprint(pub u64);

impl ProbeFingerprint {
    pub fn of_indices(indices: &[usize]) -> Self {
        let mut h = fnv::FnvHasher::default();
        h.write_u64(indices.len() as u64);
        for &i in indices {
            h.write_u64(i as u64);
        }
        Self(h.finish())
    }
}

/// One probability row per probe sample, in probe order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    values: Vec<f32>,
    num_classes: usize,
    fingerprint: ProbeFingerprint,
}

impl PosteriorMatrix {
    /// Wraps model outputs, checking the simplex invariant on every row.
    pub fn new(values: Vec<f32>, num_classes: usize, fingerprint: ProbeFingerprint) -> Result<Self> {
        let m = Self::new_unchecked(values, num_classes, fingerprint)?;
        for (r, row) in m.rows().enumerate() {
            let sum: f32 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-5 {
                return Err(data!("posterior row {r} is not a probability vector (sum {sum})"));
            }
        }
        Ok(m)
    }

    /// Wraps rows without the simplex check. Used for the ablation where the
    /// noise defense does not renormalize.
    pub fn new_unchecked(
        values: Vec<f32>,
        num_classes: usize,
        fingerprint: ProbeFingerprint,
    ) -> Result<Self> {
        if num_classes == 0 || values.len() % num_classes != 0 {
            return Err(usage!(
                "{} posterior values do not form rows of {num_classes}",
                values.len()
            ));
        }
        Ok(Self {
            values,
            num_classes,
            fingerprint,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fingerprint(&self) -> ProbeFingerprint {
        self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.num_classes)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Flattened `before - after` posteriors: the attack input.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    values: Vec<f32>,
    fingerprint: ProbeFingerprint,
}

impl DeltaVector {
    pub fn new(values: Vec<f32>, fingerprint: ProbeFingerprint) -> Self {
        Self { values, fingerprint }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fingerprint(&self) -> ProbeFingerprint {
        self.fingerprint
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// δ = flatten(before) − flatten(after), row-major by probe sample then class.
pub fn posterior_difference(before: &PosteriorMatrix, after: &PosteriorMatrix) -> Result<DeltaVector> {
    if before.fingerprint != after.fingerprint {
        return Err(usage!(
            "posteriors come from different probing sets ({:#x} vs {:#x})",
            before.fingerprint.0,
            after.fingerprint.0
        ));
    }
    if before.num_classes != after.num_classes || before.values.len() != after.values.len() {
        return Err(usage!("posterior matrices differ in shape"));
    }
    let values = before
        .values
        .iter()
        .zip(&after.values)
        .map(|(b, a)| b - a)
        .collect();
    Ok(DeltaVector::new(values, before.fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fp() -> ProbeFingerprint {
        ProbeFingerprint::of_indices(&[3, 1, 4])
    }

    #[test]
    fn identical_posteriors_give_exact_zero() {
        let p = PosteriorMatrix::new(vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05], 3, fp()).unwrap();
        let d = posterior_difference(&p, &p).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
        assert_eq!(d.len(), 6);
    }

    #[test]
    fn swapped_classes_give_two_opposite_entries() {
        let before = PosteriorMatrix::new(vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3], 3, fp()).unwrap();
        let after = PosteriorMatrix::new(vec![0.2, 0.3, 0.5, 0.1, 0.6, 0.3], 3, fp()).unwrap();
        let d = posterior_difference(&before, &after).unwrap();
        assert_eq!(d.values(), &[0.0, 0.0, 0.0, 0.5, -0.5, 0.0]);
    }

    #[test]
    fn mismatched_probes_are_rejected() {
        let a = PosteriorMatrix::new(vec![1.0, 0.0], 2, fp()).unwrap();
        let b = PosteriorMatrix::new(vec![1.0, 0.0], 2, ProbeFingerprint::of_indices(&[1])).unwrap();
        assert!(matches!(posterior_difference(&a, &b), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn non_simplex_rows_are_rejected() {
        assert!(PosteriorMatrix::new(vec![0.7, 0.7], 2, fp()).is_err());
        assert!(PosteriorMatrix::new(vec![0.7, 0.3, 0.1], 2, fp()).is_err());
        assert_ne!(ProbeFingerprint::of_indices(&[1, 2]), ProbeFingerprint::of_indices(&[2, 1]));
    }
}
