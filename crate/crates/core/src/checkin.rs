//! Seeded surrogate for location check-in data.
//!
//! Each location is a 168-dimensional vector of hourly visit counts over one
//! week (24 × 7). Every class owns a weekly profile built from Gaussian
//! bumps on the circular week; a location draws a popularity factor, a small
//! time shift and additive noise on top of its class profile, is clipped at
//! zero and max-normalized into [0, 1].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::LabeledDataset;
use crate::{config, rng, Result};

pub const HOURS_PER_WEEK: usize = 24 * 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckinParams {
    pub num_locations: usize,
    pub num_classes: usize,
    pub bumps_per_class: usize,
    pub noise_scale: f32,
    pub seed: u64,
}

impl CheckinParams {
    pub fn new(num_locations: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_locations,
            num_classes,
            bumps_per_class: 4,
            noise_scale: 0.15,
            seed,
        }
    }
}

struct Bump {
    center: f32,
    width: f32,
    amplitude: f32,
}

fn class_profiles(params: &CheckinParams) -> Vec<Vec<f32>> {
    let mut rng = rng::stream(params.seed, 0);
    (0..params.num_classes)
        .map(|_| {
            let bumps: Vec<Bump> = (0..params.bumps_per_class)
                .map(|_| Bump {
                    center: rng.random_range(0.0..HOURS_PER_WEEK as f32),
                    width: rng.random_range(1.5..6.0),
                    amplitude: rng.random_range(0.3..1.0),
                })
                .collect();
            (0..HOURS_PER_WEEK)
                .map(|h| {
                    0.05 + bumps
                        .iter()
                        .map(|b| {
                            let raw = libm::fabsf(h as f32 - b.center);
                            let d = raw.min(HOURS_PER_WEEK as f32 - raw);
                            b.amplitude * libm::expf(-d * d / (2.0 * b.width * b.width))
                        })
                        .sum::<f32>()
                })
                .collect()
        })
        .collect()
}

/// Generates the surrogate. Labels cycle through the classes, so the class
/// balance is exact up to rounding.
pub fn synthesize_checkin_dataset(params: &CheckinParams) -> Result<LabeledDataset> {
    if params.num_locations == 0 {
        return Err(config!("num_locations must be positive"));
    }
    if params.num_classes < 2 {
        return Err(config!("num_classes must be at least 2"));
    }
    if !(params.noise_scale >= 0.0) {
        return Err(config!("noise_scale must be non-negative"));
    }
    let profiles = class_profiles(params);
    let mut features = Vec::with_capacity(params.num_locations * HOURS_PER_WEEK);
    let mut labels = Vec::with_capacity(params.num_locations);
    let mut row = vec![0f32; HOURS_PER_WEEK];
    for i in 0..params.num_locations {
        let class = i % params.num_classes;
        let mut rng = rng::stream(params.seed, 1 + i as u64);
        let popularity: f32 = rng.random_range(0.5..1.5);
        let shift: i64 = rng.random_range(-1..=1);
        for (h, v) in row.iter_mut().enumerate() {
            let src = (h as i64 + shift).rem_euclid(HOURS_PER_WEEK as i64) as usize;
            let noise: f32 = StandardNormal.sample(&mut rng);
            *v = (popularity * profiles[class][src] + params.noise_scale * noise).max(0.0);
        }
        let max = row.iter().copied().fold(0f32, f32::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
        features.extend_from_slice(&row);
        labels.push(class as u32);
    }
    LabeledDataset::new(features, vec![HOURS_PER_WEEK], labels, params.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_set_has_one_location_per_class() {
        let ds = synthesize_checkin_dataset(&CheckinParams::new(8, 8, 1)).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.feature_len(), 168);
        let mut labels = ds.labels().to_vec();
        labels.sort_unstable();
        assert_eq!(labels, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn values_are_normalized_and_seeded() {
        let p = CheckinParams::new(50, 8, 4);
        let a = synthesize_checkin_dataset(&p).unwrap();
        assert!(a.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, synthesize_checkin_dataset(&p).unwrap());
        let b = synthesize_checkin_dataset(&CheckinParams { seed: 5, ..p }).unwrap();
        assert_ne!(a.features(), b.features());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synthesize_checkin_dataset(&CheckinParams::new(0, 8, 1)).is_err());
        assert!(synthesize_checkin_dataset(&CheckinParams::new(10, 1, 1)).is_err());
    }
}
