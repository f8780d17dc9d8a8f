//! Uniform posterior noise, the output-perturbation defense.

use rand::Rng as _;

use crate::posterior::PosteriorMatrix;
use crate::{rng, usage, Result};

/// Adds `U[0, scale]` noise to every entry of every emitted posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePolicy {
    pub scale: f32,
    pub renormalize: bool,
    pub seed: u64,
}

impl NoisePolicy {
    pub const DEFAULT_SCALE: f32 = 0.05;

    pub fn new(scale: f32, seed: u64) -> Result<Self> {
        let p = Self {
            scale,
            renormalize: true,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(usage!("noise scale must be a non-negative number, got {}", self.scale));
        }
        Ok(())
    }

    /// Perturbs the posteriors of one query batch in place.
    ///
    /// `query` identifies the batch (for example the index of the model
    /// version being probed); each row of each query draws from its own
    /// stream, so repeated queries get independent noise and the result does
    /// not depend on how the probe set was batched.
    pub fn perturb(&self, posteriors: &mut PosteriorMatrix, query: u64) -> Result<()> {
        self.validate()?;
        if self.scale == 0.0 {
            return Ok(());
        }
        let c = posteriors.num_classes();
        let rows = posteriors.num_rows();
        let values = posteriors.values_mut();
        for r in 0..rows {
            let mut rng = rng::stream(rng::derive(self.seed, "noise") ^ query, r as u64);
            let row = &mut values[r * c..(r + 1) * c];
            for v in row.iter_mut() {
                *v = (*v + rng.random_range(0.0..=self.scale)).max(0.0);
            }
            if self.renormalize {
                let sum: f32 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|v| *v /= sum);
                } else {
                    row.iter_mut().for_each(|v| *v = 1.0 / c as f32);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::ProbeFingerprint;
    use alloc::vec;

    fn matrix() -> PosteriorMatrix {
        PosteriorMatrix::new(vec![0.1, 0.9, 0.5, 0.5, 1.0, 0.0], 2, ProbeFingerprint(1)).unwrap()
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut m = matrix();
        NoisePolicy::new(0.0, 1).unwrap().perturb(&mut m, 0).unwrap();
        assert_eq!(m, matrix());
    }

    #[test]
    fn renormalized_rows_stay_on_simplex() {
        let mut m = matrix();
        NoisePolicy::new(0.1, 1).unwrap().perturb(&mut m, 0).unwrap();
        assert_ne!(m, matrix());
        for row in m.rows() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn queries_get_independent_deterministic_noise() {
        let p = NoisePolicy::new(0.1, 7).unwrap();
        let (mut a, mut b, mut c) = (matrix(), matrix(), matrix());
        p.perturb(&mut a, 3).unwrap();
        p.perturb(&mut b, 3).unwrap();
        p.perturb(&mut c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negative_scale_is_rejected() {
        assert!(NoisePolicy::new(-0.1, 0).is_err());
        let p = NoisePolicy { scale: f32::NAN, renormalize: true, seed: 0 };
        assert!(p.validate().is_err());
    }

    #[test]
    fn without_renormalization_mass_grows() {
        let p = NoisePolicy { scale: 0.1, renormalize: false, seed: 2 };
        let mut m = matrix();
        p.perturb(&mut m, 0).unwrap();
        assert!(m.rows().all(|r| r.iter().sum::<f32>() >= 1.0));
    }
}
