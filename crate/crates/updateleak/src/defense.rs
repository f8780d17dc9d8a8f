//! Output-perturbation defense on the victim side.

use updateleak_core::noise::NoisePolicy;
use updateleak_core::posterior::PosteriorMatrix;

use crate::data::ProbeSet;
use crate::victim::{probe, ClassifierHandle};
use crate::Result;

/// Probes `model` and perturbs every row with independent uniform noise.
/// `query` numbers the query batch so that repeated probes draw fresh noise;
/// a zero scale returns exactly what [`probe`] returns.
pub fn noisy_probe(model: &ClassifierHandle, probe_set: &ProbeSet, policy: &NoisePolicy, query: u64) -> Result<PosteriorMatrix> {
    policy.validate()?;
    let mut p = probe(model, probe_set)?;
    policy.perturb(&mut p, query)?;
    Ok(p)
}
