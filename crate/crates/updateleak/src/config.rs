//! Declarative experiment configuration (TOML).
//!
//! Every section is optional except `data` and `attack`; unknown keys are
//! rejected. Validation errors name the offending key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use updateleak_core::checkin::CheckinParams;
use updateleak_core::noise::NoisePolicy;
use updateleak_core::rng;

use crate::attack::AttackTraining;
use crate::data::DatasetName;
use crate::msr::{ExtractSettings, GanSettings};
use crate::ssr::AeTraining;
use crate::victim::{Arch, TrainSettings};
use crate::{Error, Result};

/// Environment variable overriding `data.root`.
pub const DATA_ROOT_ENV: &str = "UPDATELEAK_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub ae: AeConfig,
    #[serde(default)]
    pub ssr: SsrConfig,
    #[serde(default)]
    pub msr: MsrConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetName,
    #[serde(default = "default_root")]
    pub root: PathBuf,
    pub target_size: usize,
    pub shadow_size: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    /// Victim training samples taken from each of the target and shadow
    /// splits; the rest of each split is its updating pool.
    pub train_size: usize,
    #[serde(default)]
    pub checkin: CheckinConfig,
}

fn default_root() -> PathBuf {
    PathBuf::from("data")
}

fn default_probe_size() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckinConfig {
    pub num_locations: usize,
    pub num_classes: usize,
    pub bumps_per_class: usize,
    pub noise_scale: f32,
    /// Generator seed; a different seed yields a different city.
    pub seed: u64,
    /// When set, the shadow split is drawn from a second city synthesized
    /// with this seed instead of the target's city.
    pub shadow_seed: Option<u64>,
}

impl Default for CheckinConfig {
    fn default() -> Self {
        let p = CheckinParams::new(19_215, 8, 1);
        Self {
            num_locations: p.num_locations,
            num_classes: p.num_classes,
            bumps_per_class: p.bumps_per_class,
            noise_scale: p.noise_scale,
            seed: p.seed,
            shadow_seed: None,
        }
    }
}

impl CheckinConfig {
    pub fn params(&self) -> CheckinParams {
        CheckinParams {
            num_locations: self.num_locations,
            num_classes: self.num_classes,
            bumps_per_class: self.bumps_per_class,
            noise_scale: self.noise_scale,
            seed: self.seed,
        }
    }

    pub fn shadow_params(&self) -> Option<CheckinParams> {
        self.shadow_seed.map(|seed| CheckinParams { seed, ..self.params() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimConfig {
    /// Defaults to the dataset's architecture.
    pub arch: Option<Arch>,
    /// Architecture of the shadow model; defaults to `arch`.
    pub shadow_arch: Option<Arch>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub update_epochs: usize,
    /// Overrides the seed the victims derive from the global seed.
    pub seed: Option<u64>,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            arch: None,
            shadow_arch: None,
            epochs: 25,
            batch_size: 64,
            lr: 1e-3,
            update_epochs: 1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub m_shadow: usize,
    pub m_target: usize,
    /// Updating-set sizes. More than one builds a mixed corpus with the rows
    /// split evenly across sizes.
    pub cardinalities: Vec<usize>,
    /// Updating-set sizes of the target corpus; defaults to `cardinalities`.
    pub target_cardinalities: Option<Vec<usize>>,
}

impl CorpusConfig {
    pub fn target_cardinalities(&self) -> &[usize] {
        self.target_cardinalities.as_deref().unwrap_or(&self.cardinalities)
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            m_shadow: 2_000,
            m_target: 500,
            cardinalities: vec![1],
            target_cardinalities: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Label inference.
    Li,
    /// Label-distribution estimation.
    Lde,
    /// Single-sample reconstruction.
    Ssr,
    /// Multi-sample reconstruction.
    Msr,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Li => "li",
            AttackKind::Lde => "lde",
            AttackKind::Ssr => "ssr",
            AttackKind::Msr => "msr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f32,
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
}

fn d_epochs() -> usize {
    50
}
fn d_lr() -> f64 {
    1e-3
}
fn d_dropout() -> f32 {
    0.5
}
fn d_val() -> f64 {
    0.1
}
fn d_batch() -> usize {
    64
}
fn d_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f32,
}

impl Default for AeConfig {
    fn default() -> Self {
        let d = AeTraining::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsrConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SsrConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsrConfig {
    /// Defaults to 100 for images and 32 for tabular data.
    pub noise_dim: Option<usize>,
    pub n_gen: usize,
    pub epochs: usize,
    pub lr: f64,
    pub width_scale: f64,
    pub rows_per_step: usize,
    pub adversarial_weight: f64,
    pub kmeans_restarts: usize,
    pub silhouette_points: usize,
    /// Non-empty: detect each set's cardinality among these values.
    pub candidate_ks: Vec<usize>,
}

impl Default for MsrConfig {
    fn default() -> Self {
        let e = ExtractSettings::default();
        Self {
            noise_dim: None,
            n_gen: e.n_gen,
            epochs: 20,
            lr: 1e-3,
            width_scale: 1.0,
            rows_per_step: 8,
            adversarial_weight: 1.0,
            kmeans_restarts: e.kmeans_restarts,
            silhouette_points: e.silhouette_points,
            candidate_ks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub enabled: bool,
    pub noise_scale: f32,
    pub renormalize: bool,
    pub seed: Option<u64>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            noise_scale: NoisePolicy::DEFAULT_SCALE,
            renormalize: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Repetitions of the stochastic baselines.
    pub draws: usize,
    /// Evaluate only the first N target rows.
    pub max_instances: Option<usize>,
    /// Write PNG figures next to the report.
    pub figures: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            draws: updateleak_core::baseline::DEFAULT_DRAWS,
            max_instances: None,
            figures: true,
        }
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(if key.is_empty() { "<document>" } else { &key }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `data.root` is replaced by the environment
    /// override when set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            cfg.data.root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.probe_size > 0, "data.probe_size", "must be positive")?;
        check(d.train_size > 0, "data.train_size", "must be positive")?;
        check(d.train_size < d.target_size, "data.train_size", "must leave an updating pool in data.target_size")?;
        check(d.train_size < d.shadow_size, "data.train_size", "must leave an updating pool in data.shadow_size")?;
        if d.dataset == DatasetName::Checkin {
            check(d.checkin.num_locations > 0, "data.checkin.num_locations", "must be positive")?;
            check(d.checkin.num_classes >= 2, "data.checkin.num_classes", "must be at least 2")?;
        }
        for (key, arch) in [("victim.arch", self.victim.arch), ("victim.shadow_arch", self.victim.shadow_arch)] {
            if let Some(a) = arch {
                check(a.input_shape() == d.dataset.sample_shape(), key, "does not accept this dataset's samples")?;
            }
        }
        check(self.victim.epochs > 0, "victim.epochs", "must be positive")?;
        check(self.victim.batch_size > 0, "victim.batch_size", "must be positive")?;
        check(self.victim.lr > 0.0, "victim.lr", "must be positive")?;

        let c = &self.corpus;
        check(c.m_shadow > 0, "corpus.m_shadow", "must be positive")?;
        check(c.m_target > 0, "corpus.m_target", "must be positive")?;
        let pool = (d.target_size - d.train_size).min(d.shadow_size - d.train_size);
        for (key, ks, m) in [
            ("corpus.cardinalities", c.cardinalities.as_slice(), c.m_shadow),
            ("corpus.target_cardinalities", c.target_cardinalities(), c.m_target),
        ] {
            check(!ks.is_empty(), key, "must not be empty")?;
            check(ks.iter().all(|&k| k > 0), key, "must be positive")?;
            check(m >= ks.len(), key, "more cardinalities than corpus rows")?;
            check(ks.iter().all(|&k| k <= pool), key, "larger than the updating pools")?;
        }
        let a = &self.attack;
        for (key, ks) in [
            ("corpus.cardinalities", c.cardinalities.as_slice()),
            ("corpus.target_cardinalities", c.target_cardinalities()),
        ] {
            match a.kind {
                AttackKind::Li | AttackKind::Ssr => check(ks == [1], key, "single-sample attacks need cardinalities = [1]")?,
                AttackKind::Lde => check(ks.len() == 1, key, "distribution estimation works on one cardinality")?,
                AttackKind::Msr => check(ks.iter().all(|&k| k <= self.msr.n_gen), "msr.n_gen", "must be at least every updating-set cardinality")?,
            }
        }
        check(a.epochs > 0, "attack.epochs", "must be positive")?;
        check(a.lr > 0.0, "attack.lr", "must be positive")?;
        check((0.0..1.0).contains(&a.dropout), "attack.dropout", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&a.val_fraction), "attack.val_fraction", "must lie in [0, 1)")?;
        check(a.batch_size > 0, "attack.batch_size", "must be positive")?;
        check((0.0..1.0).contains(&self.ae.dropout), "ae.dropout", "must lie in [0, 1)")?;
        check(self.ae.epochs > 0, "ae.epochs", "must be positive")?;
        check(self.ssr.epochs > 0, "ssr.epochs", "must be positive")?;
        check(self.ssr.lr > 0.0, "ssr.lr", "must be positive")?;

        let m = &self.msr;
        check(m.noise_dim != Some(0), "msr.noise_dim", "must be positive")?;
        check(m.n_gen > 0, "msr.n_gen", "must be positive")?;
        check(m.epochs > 0, "msr.epochs", "must be positive")?;
        check(m.width_scale > 0.0, "msr.width_scale", "must be positive")?;
        check(m.rows_per_step > 0, "msr.rows_per_step", "must be positive")?;
        check(m.adversarial_weight >= 0.0, "msr.adversarial_weight", "must be non-negative")?;
        check(m.kmeans_restarts > 0, "msr.kmeans_restarts", "must be positive")?;
        check(m.candidate_ks.iter().all(|&k| k >= 2 && k <= m.n_gen), "msr.candidate_ks", "values must lie in [2, msr.n_gen]")?;

        check(self.defense.noise_scale >= 0.0 && self.defense.noise_scale.is_finite(), "defense.noise_scale", "must be non-negative")?;
        check(self.eval.max_instances != Some(0), "eval.max_instances", "must be positive")?;
        Ok(())
    }

    /// Checks the split plan against the loaded dataset's size.
    pub fn validate_sizes(&self, num_samples: usize) -> Result<()> {
        let d = &self.data;
        for (key, v) in [
            ("data.probe_size", d.probe_size),
            ("data.target_size", d.target_size),
            ("data.shadow_size", d.shadow_size),
        ] {
            check(v <= num_samples, key, &format!("{v} exceeds the {num_samples} available samples"))?;
        }
        let total = d.target_size + d.shadow_size + d.probe_size;
        check(
            total <= num_samples,
            "data.shadow_size",
            &format!("target + shadow + probe = {total} exceeds the {num_samples} available samples"),
        )
    }

    /// SHA-256 over the canonical JSON form, ignoring where data is read
    /// from and where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data.root = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn target_arch(&self) -> Arch {
        self.victim.arch.unwrap_or(match self.data.dataset {
            DatasetName::Mnist => Arch::MnistCnn,
            DatasetName::Cifar10 => Arch::CifarCnn,
            DatasetName::Checkin => Arch::CheckinMlp,
        })
    }

    pub fn shadow_arch(&self) -> Arch {
        self.victim.shadow_arch.unwrap_or_else(|| self.target_arch())
    }

    pub fn num_classes(&self) -> usize {
        match self.data.dataset {
            DatasetName::Checkin => self.data.checkin.num_classes,
            _ => 10,
        }
    }

    /// Sub-seed for one named use of randomness.
    pub fn seed_for(&self, what: &str) -> u64 {
        let base = match what.split('.').next() {
            Some("victim") => self.victim.seed.unwrap_or(self.seed),
            Some("defense") => self.defense.seed.unwrap_or(self.seed),
            _ => self.seed,
        };
        rng::derive(base, what)
    }

    pub fn victim_settings(&self, role: &str) -> TrainSettings {
        TrainSettings {
            epochs: self.victim.epochs,
            batch_size: self.victim.batch_size,
            lr: self.victim.lr,
            seed: self.seed_for(&format!("victim.{role}.train")),
        }
    }

    pub fn attack_training(&self) -> AttackTraining {
        let a = &self.attack;
        AttackTraining {
            epochs: a.epochs,
            lr: a.lr,
            dropout: a.dropout,
            val_fraction: a.val_fraction,
            batch_size: a.batch_size,
            patience: a.patience,
            seed: self.seed_for("attack"),
        }
    }

    pub fn ssr_training(&self) -> AttackTraining {
        AttackTraining {
            epochs: self.ssr.epochs,
            lr: self.ssr.lr,
            ..self.attack_training()
        }
    }

    pub fn ae_training(&self) -> AeTraining {
        AeTraining {
            epochs: self.ae.epochs,
            lr: self.ae.lr,
            dropout: self.ae.dropout,
            batch_size: self.attack.batch_size,
            val_fraction: self.attack.val_fraction,
            patience: self.attack.patience,
            seed: self.seed_for("ae"),
        }
    }

    pub fn gan_settings(&self) -> GanSettings {
        let m = &self.msr;
        let d = GanSettings::for_dataset(self.data.dataset);
        GanSettings {
            noise_dim: m.noise_dim.unwrap_or(d.noise_dim),
            width_scale: m.width_scale,
            epochs: m.epochs,
            lr: m.lr,
            rows_per_step: m.rows_per_step,
            adversarial_weight: m.adversarial_weight,
            dropout: self.attack.dropout,
            seed: self.seed_for("gan"),
        }
    }

    pub fn extract_settings(&self) -> ExtractSettings {
        ExtractSettings {
            n_gen: self.msr.n_gen,
            kmeans_restarts: self.msr.kmeans_restarts,
            silhouette_points: self.msr.silhouette_points,
            seed: self.seed_for("extract"),
        }
    }

    /// The defender's noise, when the defense is enabled.
    pub fn noise_policy(&self) -> Option<NoisePolicy> {
        self.defense.enabled.then(|| NoisePolicy {
            scale: self.defense.noise_scale,
            renormalize: self.defense.renormalize,
            seed: self.seed_for("defense"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        dataset = "mnist"
        target_size = 4000
        shadow_size = 4000
        train_size = 2000

        [attack]
        kind = "li"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.data.probe_size, 100);
        assert_eq!(c.corpus.m_shadow, 2000);
        assert_eq!(c.target_arch(), Arch::MnistCnn);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let text = format!("{MINIMAL}\nbogus_knob = 3\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn validation_names_the_key() {
        let text = MINIMAL.replace("train_size = 2000", "train_size = 5000");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "data.train_size"), "{err}");
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let err = c.validate_sizes(5000).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "data.shadow_size"), "{err}");
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.data.root = "/mnt".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
